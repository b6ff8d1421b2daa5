"""Signed structures exchanged between attester, endorser, verifier and relying party."""

from __future__ import annotations

import dataclasses
import enum
import time
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from . import encoding
from .device import (
    USAGE_PCR,
    Component,
    DeviceState,
    GeoPosition,
    KeyCertification,
    Quote,
    UsageLogEntry,
    normalize_manifest,
)
from .encoding import sign_body, signed_body, verify_body
from .errors import DecodeError, UnknownClaimKind

EVIDENCE_PCRS = (0, USAGE_PCR)

FILE_SUFFIXES = {
    "Evidence": ".evd",
    "Endorsement": ".end",
    "AttestationResult": ".res",
    "SimpleCertificate": ".cert",
}


class ClaimKind(str, enum.Enum):
    KEY_PROVENANCE = "key_provenance"
    GEOLOCATION = "geolocation"
    KEY_USAGE_SEQUENCE = "key_usage_sequence"
    SYSTEM_CONFIG = "system_config"

    @classmethod
    def parse(cls, value: Any) -> ClaimKind:
        try:
            return cls(value)
        except ValueError:
            raise UnknownClaimKind(f"unknown claim kind {value!r}") from None


class Verdict(str, enum.Enum):
    AFFIRMING = "affirming"
    WARNING = "warning"
    CONTRAINDICATED = "contraindicated"


class Severity(str, enum.Enum):
    MANDATORY = "mandatory"
    ADVISORY = "advisory"


# ---------------------------------------------------------------------------
# claims
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyProvenanceBody:
    # handles of the keys whose certifications ride in Evidence.key_certifications
    subjects: list[bytes]


@dataclass(frozen=True)
class UsageSequenceBody:
    start_seq: int
    end_seq: int  # exclusive
    end_register: bytes
    entries: list[UsageLogEntry]


@dataclass(frozen=True)
class SystemConfigBody:
    components: list[Component]


CLAIM_BODY_TYPES: dict[ClaimKind, type] = {
    ClaimKind.KEY_PROVENANCE: KeyProvenanceBody,
    ClaimKind.GEOLOCATION: GeoPosition,
    ClaimKind.KEY_USAGE_SEQUENCE: UsageSequenceBody,
    ClaimKind.SYSTEM_CONFIG: SystemConfigBody,
}


@dataclass(frozen=True)
class Claim:
    kind: ClaimKind
    body: Any

    def __post_init__(self):
        kind = ClaimKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        expected = CLAIM_BODY_TYPES[kind]
        if not isinstance(self.body, expected):
            raise TypeError(f"{kind.value} claim needs a {expected.__name__} body")

    def to_jsonable(self):
        return {"kind": self.kind.value, "body": encoding.to_jsonable(self.body)}

    @classmethod
    def from_jsonable(cls, obj):
        if not isinstance(obj, dict) or set(obj) != {"kind", "body"}:
            raise DecodeError("claim must have exactly 'kind' and 'body'")
        kind = ClaimKind.parse(obj["kind"])
        body = encoding.from_jsonable(obj["body"], CLAIM_BODY_TYPES[kind])
        return cls(kind, body)


# ---------------------------------------------------------------------------
# signed structures
# ---------------------------------------------------------------------------


class _Signed:
    signature: bytes

    def body(self) -> bytes:
        return signed_body(self)

    def verify(self, public_key: bytes) -> bool:
        return verify_body(self.body(), self.signature, public_key)

    def signed_with(self, private_key: bytes):
        return dataclasses.replace(self, signature=sign_body(self.body(), private_key))


@dataclass(frozen=True)
class Evidence(_Signed):
    quote: Quote
    claims: list[Claim]
    key_certifications: list[KeyCertification]
    produced_at: int
    signature: bytes = b""

    def claim(self, kind: ClaimKind) -> Claim | None:
        for c in self.claims:
            if c.kind == kind:
                return c
        return None

    def certification(self, handle: bytes) -> KeyCertification | None:
        for c in self.key_certifications:
            if c.subject_handle == handle:
                return c
        return None


@dataclass(frozen=True)
class Endorsement(_Signed):
    endorser_id: str
    device_id: bytes
    reference_values: list[Component]
    ek_public: bytes
    ak_public: bytes
    issued_at: int
    signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "reference_values", list(normalize_manifest(self.reference_values)))


@dataclass(frozen=True)
class Finding:
    rule_id: str
    kind: str
    severity: Severity
    passed: bool
    detail: str


def verdict_for(findings: Iterable[Finding]) -> Verdict:
    failed = [f for f in findings if not f.passed]
    if any(f.severity == Severity.MANDATORY for f in failed):
        return Verdict.CONTRAINDICATED
    if failed:
        return Verdict.WARNING
    return Verdict.AFFIRMING


@dataclass(frozen=True)
class AttestationResult(_Signed):
    verifier_id: str
    device_id: bytes
    verdict: Verdict
    findings: list[Finding]
    nonce: bytes
    issued_at: int
    signature: bytes = b""

    def consistent(self) -> bool:
        return self.verdict == verdict_for(self.findings)

    def finding(self, rule_id: str) -> Finding | None:
        for f in self.findings:
            if f.rule_id == rule_id:
                return f
        return None


@dataclass(frozen=True)
class SimpleCertificate(_Signed):
    subject_public_key: bytes
    subject_name: str
    issuer_name: str
    issuer_public_key: bytes
    not_before: int
    not_after: int
    signature: bytes = b""

    def __post_init__(self):
        if self.not_after < self.not_before:
            raise ValueError("certificate validity ends before it begins")

    @property
    def self_signed(self) -> bool:
        return (
            self.issuer_public_key == self.subject_public_key
            and self.issuer_name == self.subject_name
        )


def make_certificate(
    subject_public_key: bytes,
    subject_name: str,
    issuer_name: str,
    issuer_private_key: bytes,
    not_before: int,
    not_after: int,
) -> SimpleCertificate:
    cert = SimpleCertificate(
        subject_public_key=subject_public_key,
        subject_name=subject_name,
        issuer_name=issuer_name,
        issuer_public_key=encoding.public_key_of(issuer_private_key),
        not_before=not_before,
        not_after=not_after,
    )
    return cert.signed_with(issuer_private_key)


def verify_chain(
    chain: Sequence[SimpleCertificate],
    at: int | None = None,
    trusted_roots: Iterable[bytes] | None = None,
) -> bool:
    """Leaf-first chain check.

    Each certificate must be signed by the next one's subject key, name the
    next one's subject as issuer and fit inside its validity window; the last
    must be self-signed (and, if ``trusted_roots`` is given, one of them).
    With ``at``, every certificate must also be valid at that instant.
    """
    if not chain:
        return False
    for cert, issuer in zip(chain, chain[1:]):
        if cert.issuer_public_key != issuer.subject_public_key:
            return False
        if cert.issuer_name != issuer.subject_name:
            return False
        if cert.not_before < issuer.not_before or cert.not_after > issuer.not_after:
            return False
        if not cert.verify(issuer.subject_public_key):
            return False
    root = chain[-1]
    if not root.self_signed or not root.verify(root.subject_public_key):
        return False
    if trusted_roots is not None and root.subject_public_key not in set(trusted_roots):
        return False
    if at is not None and any(not c.not_before <= at <= c.not_after for c in chain):
        return False
    return True


# ---------------------------------------------------------------------------
# evidence assembly
# ---------------------------------------------------------------------------


def build_evidence(
    device: DeviceState,
    nonce: bytes,
    requested_claims: Iterable[ClaimKind | str],
    now: int | None = None,
    subjects: Sequence[bytes] | None = None,
) -> Evidence:
    """Assemble AK-signed evidence answering ``nonce``.

    ``subjects`` selects the keys reported under key provenance; by default
    every application key on the device is reported.
    """
    kinds = []
    for k in requested_claims:
        kind = ClaimKind.parse(k)
        if kind not in kinds:
            kinds.append(kind)
    with device._lock:
        quote = device.quote(nonce, EVIDENCE_PCRS)
        claims: list[Claim] = []
        certs: list[KeyCertification] = []
        for kind in kinds:
            if kind is ClaimKind.KEY_PROVENANCE:
                handles = list(subjects) if subjects is not None else device.application_keys()
                certs = [device.certify_key(h) for h in handles]
                body: Any = KeyProvenanceBody(subjects=[c.subject_handle for c in certs])
            elif kind is ClaimKind.GEOLOCATION:
                body = device.geolocation
            elif kind is ClaimKind.KEY_USAGE_SEQUENCE:
                log = list(device.usage_log)
                body = UsageSequenceBody(
                    start_seq=0,
                    end_seq=len(log),
                    end_register=device.pcr_bank.read(USAGE_PCR),
                    entries=log,
                )
            else:
                body = SystemConfigBody(components=list(device.component_manifest))
            claims.append(Claim(kind, body))
        ev = Evidence(
            quote=quote,
            claims=claims,
            key_certifications=certs,
            produced_at=int(time.time()) if now is None else now,
        )
        return dataclasses.replace(ev, signature=device._ak_sign(ev.body()))
