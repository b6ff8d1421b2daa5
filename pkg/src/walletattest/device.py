"""Emulated wallet trusted hardware.

A :class:`DeviceState` behaves like a tiny TPM: 24 SHA-256 PCRs, a monotonic
counter, a shielded key store and an endorsement/attestation key pair that
never leave the device. Register 16 records every transaction the wallet
signs, so the ledger can later be reconciled against it.
"""

from __future__ import annotations

import dataclasses
import functools
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import encoding
from .encoding import RandBytes, sha256, sign_body, signed_body, verify_body
from .errors import (
    BadNonce,
    DecodeError,
    EmptyManifest,
    ExportDenied,
    IndexOutOfRange,
    InvalidAttributes,
    InvalidGeolocation,
    InvalidManifest,
    KeyUsageDenied,
    UnknownHandle,
    UnknownParent,
)

NUM_PCRS = 24
PCR_SIZE = 32
USAGE_PCR = 16
ZERO_PCR = bytes(PCR_SIZE)
NONCE_SIZE = 32
COUNTER_MAX = 2**64 - 1

HANDLE_SIZE = 8
DEVICE_ID_SIZE = 16

_SEAL_INFO = b"walletattest device seal v1"


@dataclass(frozen=True)
class GeoPosition:
    latitude: float
    longitude: float
    altitude: float

    def __post_init__(self):
        for name in ("latitude", "longitude", "altitude"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise InvalidGeolocation(f"{name} must be a number")
            object.__setattr__(self, name, float(v))
        if not -90.0 <= self.latitude <= 90.0:
            raise InvalidGeolocation(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise InvalidGeolocation(f"longitude {self.longitude} outside [-180, 180]")
        if self.altitude != self.altitude or abs(self.altitude) == float("inf"):
            raise InvalidGeolocation("altitude must be finite")


@dataclass(frozen=True)
class KeyAttributes:
    fixed_to_device: bool
    sign_only: bool = True
    created_inside: bool = True

    def __post_init__(self):
        if self.fixed_to_device and not self.created_inside:
            raise InvalidAttributes("a fixed_to_device key must be created inside the device")


@dataclass(frozen=True)
class UsageLogEntry:
    seq: int
    tx_digest: bytes
    counter_after: int


@dataclass(frozen=True)
class Component:
    name: str
    digest: bytes


def normalize_manifest(manifest: Iterable) -> tuple[Component, ...]:
    comps = []
    for item in manifest:
        c = item if isinstance(item, Component) else Component(*item)
        if not isinstance(c.name, str) or not c.name:
            raise InvalidManifest("component name must be a non-empty string")
        if not isinstance(c.digest, (bytes, bytearray)) or not c.digest:
            raise InvalidManifest(f"component {c.name!r}: digest must be non-empty bytes")
        comps.append(Component(c.name, bytes(c.digest)))
    if not comps:
        raise EmptyManifest("component manifest is empty")
    names = [c.name for c in comps]
    if len(set(names)) != len(names):
        raise InvalidManifest("duplicate component names")
    return tuple(sorted(comps, key=lambda c: c.name))


def manifest_digest(manifest: Iterable) -> bytes:
    """SHA-256 over the canonical (name-sorted) encoding of a manifest."""
    return encoding.digest_of(list(normalize_manifest(manifest)))


def extend_value(previous: bytes, digest: bytes) -> bytes:
    return sha256(previous, digest)


def replay_chain(digests: Iterable[bytes], start: bytes = ZERO_PCR) -> bytes:
    value = start
    for d in digests:
        value = extend_value(value, d)
    return value


def composite_digest(values: Sequence[bytes]) -> bytes:
    return sha256(b"".join(values))


class PcrBank:
    """Registers that can only change by hash-extension."""

    __slots__ = ("_regs",)

    def __init__(self, registers: Sequence[bytes] | None = None):
        regs = list(registers) if registers is not None else [ZERO_PCR] * NUM_PCRS
        if len(regs) != NUM_PCRS or any(len(r) != PCR_SIZE for r in regs):
            raise ValueError(f"expected {NUM_PCRS} registers of {PCR_SIZE} bytes")
        self._regs = [bytes(r) for r in regs]

    @property
    def registers(self) -> tuple[bytes, ...]:
        return tuple(self._regs)

    def read(self, index: int) -> bytes:
        _check_index(index)
        return self._regs[index]

    def extend(self, index: int, digest: bytes) -> bytes:
        _check_index(index)
        if len(digest) != PCR_SIZE:
            raise ValueError(f"extend digest must be {PCR_SIZE} bytes")
        self._regs[index] = extend_value(self._regs[index], bytes(digest))
        return self._regs[index]

    def to_jsonable(self):
        return [encoding.b64url(r) for r in self._regs]

    @classmethod
    def from_jsonable(cls, obj):
        regs = encoding.from_jsonable(obj, list[bytes])
        try:
            return cls(regs)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc

    def __eq__(self, other):
        return isinstance(other, PcrBank) and self._regs == other._regs

    def __repr__(self):
        nonzero = [i for i, r in enumerate(self._regs) if r != ZERO_PCR]
        return f"PcrBank(nonzero={nonzero})"


def _check_index(index: int) -> None:
    if isinstance(index, bool) or not isinstance(index, int) or not 0 <= index < NUM_PCRS:
        raise IndexOutOfRange(f"PCR index {index!r} not in 0..{NUM_PCRS - 1}")


@dataclass
class MonotonicCounter:
    value: int = 0

    def increment(self) -> int:
        if self.value >= COUNTER_MAX:
            raise OverflowError("monotonic counter exhausted")
        self.value += 1
        return self.value


@dataclass
class KeyRecord:
    handle: bytes
    public_part: bytes
    attributes: KeyAttributes
    parent: bytes | None
    creation_digest: bytes
    creation_pcrs: list[bytes]
    # never serialized in the clear; sealed separately on save
    private_part: bytes = field(default=b"", repr=False, compare=False, metadata={"encode": False})

    def recompute_creation_digest(self, device_id: bytes) -> bytes:
        return creation_digest(device_id, self.handle, self.attributes, self.creation_pcrs)


def creation_digest(device_id: bytes, handle: bytes, attrs: KeyAttributes, pcrs: Sequence[bytes]) -> bytes:
    return encoding.digest_of(
        {"device_id": device_id, "handle": handle, "attributes": attrs, "pcrs": list(pcrs)}
    )


@dataclass(frozen=True)
class Quote:
    device_id: bytes
    pcr_selection: list[int]
    pcr_values: list[bytes]
    composite_digest: bytes
    counter: int
    nonce: bytes
    config_digest: bytes
    geolocation: GeoPosition
    signature: bytes = b""

    def body(self) -> bytes:
        return signed_body(self)

    def verify(self, ak_public: bytes) -> bool:
        """Signature under ``ak_public`` and internal consistency."""
        if len(self.pcr_selection) != len(self.pcr_values):
            return False
        if self.pcr_selection != sorted(set(self.pcr_selection)):
            return False
        if composite_digest(self.pcr_values) != self.composite_digest:
            return False
        return verify_body(self.body(), self.signature, ak_public)

    def pcr(self, index: int) -> bytes | None:
        try:
            return self.pcr_values[self.pcr_selection.index(index)]
        except ValueError:
            return None


@dataclass(frozen=True)
class KeyCertification:
    """Statement by a device key about another key it holds."""

    device_id: bytes
    subject_handle: bytes
    subject_public: bytes
    attributes: KeyAttributes
    creation_digest: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        return signed_body(self)

    def verify(self, signer_public: bytes) -> bool:
        return verify_body(self.body(), self.signature, signer_public)


@dataclass(frozen=True)
class ProvisioningRecord:
    """What the manufacturer learns about a device when it leaves the line."""

    device_id: bytes
    manufacturer_id: str
    ek_public: bytes
    ak_public: bytes
    ak_certification: KeyCertification
    component_manifest: list[Component]


def _serialized(method):
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        with self._lock:
            return method(self, *args, **kwargs)

    return wrapper


@dataclass(eq=False)
class DeviceState:
    device_id: bytes
    manufacturer_id: str
    pcr_bank: PcrBank
    counter: MonotonicCounter
    key_store: dict[bytes, KeyRecord]
    ek_handle: bytes
    ak_handle: bytes
    ak_certification: KeyCertification
    geolocation: GeoPosition
    component_manifest: list[Component]
    config_digest: bytes
    usage_log: list[UsageLogEntry] = field(default_factory=list)
    counter_at_provisioning: int = 0
    _rand: RandBytes = field(default=os.urandom, repr=False, metadata={"encode": False})
    _lock: threading.RLock = field(
        default_factory=threading.RLock, repr=False, metadata={"encode": False}
    )

    # -- accessors ---------------------------------------------------------

    @property
    def endorsement_key(self) -> KeyRecord:
        return self.key_store[self.ek_handle]

    @property
    def attestation_key(self) -> KeyRecord:
        return self.key_store[self.ak_handle]

    def _key(self, handle: bytes) -> KeyRecord:
        try:
            return self.key_store[bytes(handle)]
        except (KeyError, TypeError):
            raise UnknownHandle(f"no key with handle {bytes(handle).hex()}") from None

    def public_key(self, handle: bytes) -> bytes:
        return self._key(handle).public_part

    def key_attributes(self, handle: bytes) -> KeyAttributes:
        return self._key(handle).attributes

    def application_keys(self) -> list[bytes]:
        """Handles of every key other than the EK and AK, in creation order."""
        return [h for h in self.key_store if h not in (self.ek_handle, self.ak_handle)]

    def provisioning_record(self) -> ProvisioningRecord:
        return ProvisioningRecord(
            device_id=self.device_id,
            manufacturer_id=self.manufacturer_id,
            ek_public=self.endorsement_key.public_part,
            ak_public=self.attestation_key.public_part,
            ak_certification=self.ak_certification,
            component_manifest=list(self.component_manifest),
        )

    # -- key management ----------------------------------------------------

    def _new_handle(self) -> bytes:
        while True:
            h = self._rand(HANDLE_SIZE)
            if h not in self.key_store:
                return h

    def _store_new_key(self, private: bytes, attrs: KeyAttributes, parent: bytes | None) -> bytes:
        handle = self._new_handle()
        pcrs = list(self.pcr_bank.registers)
        self.key_store[handle] = KeyRecord(
            handle=handle,
            public_part=encoding.public_key_of(private),
            attributes=attrs,
            parent=parent,
            creation_digest=creation_digest(self.device_id, handle, attrs, pcrs),
            creation_pcrs=pcrs,
            private_part=private,
        )
        return handle

    @_serialized
    def create_key(self, attrs: KeyAttributes, parent: bytes | None = None) -> bytes:
        """Generate a key pair inside the device and return its handle."""
        if not attrs.created_inside:
            raise InvalidAttributes("create_key always generates inside the device")
        if parent is not None:
            parent = bytes(parent)
            if parent not in self.key_store:
                raise UnknownParent(f"no parent key {parent.hex()}")
            if not self.key_store[parent].attributes.fixed_to_device:
                raise InvalidAttributes("parent key must be fixed_to_device")
        private, _ = encoding.generate_keypair(self._rand)
        return self._store_new_key(private, attrs, parent)

    @_serialized
    def import_key(self, private_part: bytes, sign_only: bool = True) -> bytes:
        """Load externally generated key material. Such keys are never fixed."""
        encoding.public_key_of(private_part)  # validates length
        attrs = KeyAttributes(fixed_to_device=False, sign_only=sign_only, created_inside=False)
        return self._store_new_key(bytes(private_part), attrs, None)

    @_serialized
    def export_key(self, handle: bytes) -> bytes:
        rec = self._key(handle)
        if rec.attributes.fixed_to_device:
            raise ExportDenied(f"key {rec.handle.hex()} is bound to this device")
        return rec.private_part

    def _usable_key(self, handle: bytes) -> KeyRecord:
        rec = self._key(handle)
        if rec.handle in (self.ek_handle, self.ak_handle):
            raise KeyUsageDenied("EK and AK are restricted to attestation")
        return rec

    # -- registers ---------------------------------------------------------

    @_serialized
    def extend_pcr(self, index: int, digest: bytes) -> bytes:
        return self.pcr_bank.extend(index, digest)

    # -- signing -----------------------------------------------------------

    @_serialized
    def sign_transaction(self, handle: bytes, payload: bytes) -> tuple[bytes, UsageLogEntry]:
        rec = self._usable_key(handle)
        signature = sign_body(payload, rec.private_part)
        tx_digest = sha256(payload)
        self.pcr_bank.extend(USAGE_PCR, tx_digest)
        after = self.counter.increment()
        entry = UsageLogEntry(seq=len(self.usage_log), tx_digest=tx_digest, counter_after=after)
        self.usage_log.append(entry)
        return signature, entry

    @_serialized
    def respond_challenge(self, handle: bytes, challenge: bytes) -> bytes:
        """Plain proof-of-possession signature. Says nothing about where the key lives."""
        rec = self._usable_key(handle)
        return sign_body(challenge, rec.private_part)

    # -- attestation -------------------------------------------------------

    @_serialized
    def quote(self, nonce: bytes, pcr_selection: Iterable[int]) -> Quote:
        if not isinstance(nonce, (bytes, bytearray)) or len(nonce) != NONCE_SIZE:
            raise BadNonce(f"nonce must be exactly {NONCE_SIZE} bytes")
        selection = list(pcr_selection)
        if not selection:
            raise IndexOutOfRange("empty PCR selection")
        for i in selection:
            _check_index(i)
        selection = sorted(set(selection))
        values = [self.pcr_bank.read(i) for i in selection]
        q = Quote(
            device_id=self.device_id,
            pcr_selection=selection,
            pcr_values=values,
            composite_digest=composite_digest(values),
            counter=self.counter.value,
            nonce=bytes(nonce),
            config_digest=self.config_digest,
            geolocation=self.geolocation,
        )
        return dataclasses.replace(q, signature=self._ak_sign(q.body()))

    @_serialized
    def certify_key(self, subject: bytes) -> KeyCertification:
        rec = self._key(subject)
        cert = KeyCertification(
            device_id=self.device_id,
            subject_handle=rec.handle,
            subject_public=rec.public_part,
            attributes=rec.attributes,
            creation_digest=rec.creation_digest,
        )
        return dataclasses.replace(cert, signature=self._ak_sign(cert.body()))

    def _ak_sign(self, body: bytes) -> bytes:
        """AK signature over a structure body the device itself assembled."""
        return sign_body(body, self.attestation_key.private_part)

    # -- configuration -----------------------------------------------------

    @_serialized
    def update_component(self, name: str, digest: bytes) -> bytes:
        """Install a component (firmware update, board swap). Returns the new config digest."""
        comps = {c.name: c for c in self.component_manifest}
        comps[name] = Component(name, bytes(digest))
        self.component_manifest = list(normalize_manifest(comps.values()))
        self.config_digest = manifest_digest(self.component_manifest)
        return self.config_digest

    # -- audit -------------------------------------------------------------

    def audit(self) -> list[str]:
        """Check the state invariants; return a list of problems (empty when sound)."""
        problems = []
        for h in (self.ek_handle, self.ak_handle):
            rec = self.key_store.get(h)
            if rec is None or not rec.attributes.fixed_to_device:
                problems.append(f"restricted key {h.hex()} missing or not fixed")
        if len(self.usage_log) != self.counter.value - self.counter_at_provisioning:
            problems.append("usage log length does not match counter")
        for i, e in enumerate(self.usage_log):
            if e.seq != i:
                problems.append(f"usage log seq {e.seq} at position {i}")
        afters = [e.counter_after for e in self.usage_log]
        if any(b <= a for a, b in zip(afters, afters[1:])):
            problems.append("usage log counter_after not strictly increasing")
        if replay_chain(e.tx_digest for e in self.usage_log) != self.pcr_bank.read(USAGE_PCR):
            problems.append("usage log does not replay to PCR 16")
        for rec in self.key_store.values():
            if rec.recompute_creation_digest(self.device_id) != rec.creation_digest:
                problems.append(f"creation digest mismatch for key {rec.handle.hex()}")
        if manifest_digest(self.component_manifest) != self.config_digest:
            problems.append("config digest does not match manifest")
        return problems

    # -- persistence -------------------------------------------------------

    def save(self, path: str | os.PathLike, secret: bytes | None = None) -> bytes:
        """Write the device to ``path``; private parts are sealed under ``secret``.

        When no secret is given a fresh one is generated and written next to
        the device file as ``<path>.secret`` (mode 0600). Returns the secret.
        """
        path = Path(path)
        with self._lock:
            if secret is None:
                secret = os.urandom(32)
                secret_path = Path(str(path) + ".secret")
                fd = os.open(secret_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
                with os.fdopen(fd, "wb") as fh:
                    fh.write(encoding.b64url(secret).encode("ascii"))
            doc = encoding.to_jsonable(self)
            private = {encoding.b64url(h): r.private_part for h, r in self.key_store.items()}
            iv = os.urandom(12)
            sealed = AESGCM(_seal_key(secret, self.device_id)).encrypt(
                iv, encoding.canonical_encode(private), self.device_id
            )
            doc["sealed_keys"] = encoding.b64url(iv + sealed)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(encoding.dumps_canonical(doc))
            os.replace(tmp, path)
        return secret

    @classmethod
    def load(cls, path: str | os.PathLike, secret: bytes | None = None,
             rand: RandBytes | None = None) -> DeviceState:
        path = Path(path)
        if secret is None:
            secret = encoding.unb64url(Path(str(path) + ".secret").read_text().strip())
        doc = encoding.loads_json(path.read_bytes())
        if not isinstance(doc, dict) or "sealed_keys" not in doc:
            raise DecodeError(f"{path}: not a device file")
        blob = encoding.unb64url(doc.pop("sealed_keys"))
        dev = cls.from_jsonable(doc)
        try:
            plain = AESGCM(_seal_key(secret, dev.device_id)).decrypt(blob[:12], blob[12:], dev.device_id)
        except Exception as exc:
            raise DecodeError(f"{path}: cannot unseal key material") from exc
        private = encoding.canonical_decode(plain, dict[str, bytes])
        for h, rec in dev.key_store.items():
            rec.private_part = private[encoding.b64url(h)]
        if rand is not None:
            dev._rand = rand
        return dev

    def to_jsonable(self):
        out = {}
        for f in dataclasses.fields(self):
            if not f.metadata.get("encode", True):
                continue
            v = getattr(self, f.name)
            if f.name == "key_store":
                v = list(v.values())
            out[f.name] = encoding.to_jsonable(v)
        return out

    @classmethod
    def from_jsonable(cls, obj):
        # key_store travels as a list of records; rebuild the mapping
        if not isinstance(obj, dict):
            raise DecodeError("device document must be an object")
        obj = dict(obj)
        records = encoding.from_jsonable(obj.get("key_store"), list[KeyRecord])
        obj["key_store"] = {}
        dev = encoding.decode_dataclass(obj, cls)
        dev.key_store = {r.handle: r for r in records}
        return dev


def _seal_key(secret: bytes, device_id: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=device_id, info=_SEAL_INFO).derive(secret)


def provision_device(
    manufacturer_id: str,
    geolocation: GeoPosition,
    component_manifest: Iterable,
    rand: RandBytes | None = None,
) -> DeviceState:
    """Create a fresh device with its EK, an EK-certified AK and zeroed registers."""
    if not isinstance(geolocation, GeoPosition):
        geolocation = GeoPosition(*geolocation)
    manifest = list(normalize_manifest(component_manifest))
    rand = rand or os.urandom
    device_id = rand(DEVICE_ID_SIZE)
    placeholder = KeyCertification(b"", b"", b"", KeyAttributes(True), b"")
    dev = DeviceState(
        device_id=device_id,
        manufacturer_id=manufacturer_id,
        pcr_bank=PcrBank(),
        counter=MonotonicCounter(0),
        key_store={},
        ek_handle=b"",
        ak_handle=b"",
        ak_certification=placeholder,
        geolocation=geolocation,
        component_manifest=manifest,
        config_digest=manifest_digest(manifest),
        _rand=rand,
    )
    restricted = KeyAttributes(fixed_to_device=True, sign_only=True, created_inside=True)
    ek_priv, _ = encoding.generate_keypair(rand)
    dev.ek_handle = dev._store_new_key(ek_priv, restricted, None)
    ak_priv, _ = encoding.generate_keypair(rand)
    dev.ak_handle = dev._store_new_key(ak_priv, restricted, dev.ek_handle)
    ak = dev.attestation_key
    stmt = KeyCertification(
        device_id=device_id,
        subject_handle=ak.handle,
        subject_public=ak.public_part,
        attributes=ak.attributes,
        creation_digest=ak.creation_digest,
    )
    dev.ak_certification = dataclasses.replace(
        stmt, signature=sign_body(stmt.body(), dev.endorsement_key.private_part)
    )
    return dev
