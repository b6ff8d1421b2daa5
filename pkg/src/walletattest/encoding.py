"""Canonical JSON encoding, digests and Ed25519 signing.

Canonical form: object keys sorted by code point, no whitespace, integers
in plain decimal, ``bytes`` as unpadded base64url strings. Dataclasses are
encoded field by field; decoding is driven by the target class's type
hints, so a ``bytes`` field and a ``str`` field never get confused.
"""

from __future__ import annotations

import base64
import dataclasses
import enum
import hashlib
import json
import math
import os
import random
import types
import typing
from typing import Any, Callable, TypeVar

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import DecodeError, MalformedKey

T = TypeVar("T")

RandBytes = Callable[[int], bytes]

SIGNATURE_FIELD = "signature"


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def unb64url(text: str) -> bytes:
    if not isinstance(text, str) or "=" in text:
        raise DecodeError(f"not an unpadded base64url string: {text!r}")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (ValueError, TypeError) as exc:
        raise DecodeError(f"bad base64url: {text!r}") from exc
    if b64url(raw) != text:
        raise DecodeError(f"non-canonical base64url: {text!r}")
    return raw


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def system_rand() -> RandBytes:
    return os.urandom


def seeded_rand(seed: int) -> RandBytes:
    """Reproducible byte source for demos and tests. Not for real keys."""
    rng = random.Random(seed)
    return rng.randbytes


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def to_jsonable(value: Any) -> Any:
    """Lower a value to plain JSON types (bytes become base64url)."""
    if isinstance(value, enum.Enum):
        return to_jsonable(value.value)
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError("non-finite float cannot be encoded")
        return value
    if isinstance(value, (bytes, bytearray, memoryview)):
        return b64url(bytes(value))
    hook = getattr(value, "to_jsonable", None)
    if hook is not None and not isinstance(value, type):
        return hook()
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {
            f.name: to_jsonable(getattr(value, f.name))
            for f in dataclasses.fields(value)
            if f.metadata.get("encode", True)
        }
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise TypeError(f"object keys must be str, got {type(k).__name__}")
            out[k] = to_jsonable(v)
        return out
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    raise TypeError(f"cannot encode {type(value).__name__}")


def dumps_canonical(obj: Any) -> bytes:
    return json.dumps(
        obj,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def canonical_encode(value: Any) -> bytes:
    return dumps_canonical(to_jsonable(value))


def signed_body(value: Any) -> bytes:
    """Canonical bytes of a signed structure with its signature removed."""
    obj = to_jsonable(value)
    obj.pop(SIGNATURE_FIELD, None)
    return dumps_canonical(obj)


def digest_of(value: Any) -> bytes:
    return sha256(canonical_encode(value))


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise DecodeError(f"duplicate key {k!r}")
        out[k] = v
    return out


def loads_json(data: bytes | str) -> Any:
    try:
        return json.loads(data, object_pairs_hook=_reject_duplicates)
    except DecodeError:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        raise DecodeError(f"invalid JSON: {exc}") from exc


_hints_cache: dict[type, dict[str, Any]] = {}


def _hints(cls: type) -> dict[str, Any]:
    if cls not in _hints_cache:
        _hints_cache[cls] = typing.get_type_hints(cls)
    return _hints_cache[cls]


def from_jsonable(obj: Any, tp: Any) -> Any:
    """Rebuild a typed value from plain JSON types, strictly."""
    if tp is Any:
        return obj
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is typing.Union or origin is types.UnionType:
        if obj is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        if len(non_none) == 1:
            return from_jsonable(obj, non_none[0])
        raise DecodeError(f"ambiguous union {tp}")
    if origin is typing.Literal:
        if obj not in args:
            raise DecodeError(f"expected one of {args}, got {obj!r}")
        return obj
    if origin in (list, tuple, dict):
        return _decode_container(obj, origin, args)

    if tp is bytes:
        return unb64url(obj)
    if tp is bool:
        if not isinstance(obj, bool):
            raise DecodeError(f"expected bool, got {obj!r}")
        return obj
    if tp is int:
        if isinstance(obj, bool) or not isinstance(obj, int):
            raise DecodeError(f"expected int, got {obj!r}")
        return obj
    if tp is float:
        if isinstance(obj, bool) or not isinstance(obj, (int, float)):
            raise DecodeError(f"expected number, got {obj!r}")
        return float(obj)
    if tp is str:
        if not isinstance(obj, str):
            raise DecodeError(f"expected string, got {obj!r}")
        return obj
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(obj)
        except ValueError as exc:
            raise DecodeError(f"bad {tp.__name__}: {obj!r}") from exc
    if isinstance(tp, type) and hasattr(tp, "from_jsonable"):
        return tp.from_jsonable(obj)
    if isinstance(tp, type) and dataclasses.is_dataclass(tp):
        return decode_dataclass(obj, tp)
    raise TypeError(f"unsupported type {tp!r}")


def _decode_container(obj: Any, origin: Any, args: tuple) -> Any:
    if origin is dict:
        if not isinstance(obj, dict):
            raise DecodeError(f"expected object, got {obj!r}")
        vt = args[1] if args else Any
        return {k: from_jsonable(v, vt) for k, v in obj.items()}
    if not isinstance(obj, list):
        raise DecodeError(f"expected array, got {obj!r}")
    if origin is list:
        et = args[0] if args else Any
        return [from_jsonable(v, et) for v in obj]
    if len(args) == 2 and args[1] is Ellipsis:
        return tuple(from_jsonable(v, args[0]) for v in obj)
    if len(obj) != len(args):
        raise DecodeError(f"expected {len(args)}-tuple, got {len(obj)} items")
    return tuple(from_jsonable(v, t) for v, t in zip(obj, args))


def decode_dataclass(obj: Any, cls: type[T]) -> T:
    if not isinstance(obj, dict):
        raise DecodeError(f"expected object for {cls.__name__}, got {type(obj).__name__}")
    hints = _hints(cls)
    fields = [f for f in dataclasses.fields(cls) if f.metadata.get("encode", True)]
    names = {f.name for f in fields}
    extra = set(obj) - names
    if extra:
        raise DecodeError(f"{cls.__name__}: unexpected fields {sorted(extra)}")
    kwargs = {}
    for f in fields:
        if f.name not in obj:
            raise DecodeError(f"{cls.__name__}: missing field {f.name!r}")
        kwargs[f.name] = from_jsonable(obj[f.name], hints[f.name])
    try:
        return cls(**kwargs)
    except DecodeError:
        raise
    except (ValueError, TypeError) as exc:
        raise DecodeError(f"{cls.__name__}: {exc}") from exc


def canonical_decode(data: bytes | str, cls: type[T]) -> T:
    return from_jsonable(loads_json(data), cls)


# ---------------------------------------------------------------------------
# Ed25519
# ---------------------------------------------------------------------------


def generate_keypair(rand: RandBytes | None = None) -> tuple[bytes, bytes]:
    """Return ``(private_seed, public_key)``, 32 bytes each."""
    seed = (rand or os.urandom)(32)
    return seed, public_key_of(seed)


def _private(key: bytes) -> Ed25519PrivateKey:
    if not isinstance(key, (bytes, bytearray)) or len(key) != 32:
        raise MalformedKey("Ed25519 private key must be 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(bytes(key))


def public_key_of(private_key: bytes) -> bytes:
    return _private(private_key).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def sign_body(body: bytes, signing_key: bytes) -> bytes:
    return _private(signing_key).sign(body)


def verify_body(body: bytes, signature: bytes, public_key: bytes) -> bool:
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != 32:
        raise MalformedKey("Ed25519 public key must be 32 bytes")
    try:
        pub = Ed25519PublicKey.from_public_bytes(bytes(public_key))
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc
    if len(signature) != 64:
        return False
    try:
        pub.verify(bytes(signature), body)
    except InvalidSignature:
        return False
    return True
