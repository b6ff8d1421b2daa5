"""Neutral verifier: appraise evidence against endorsements under a policy.

Checks always run in the same order (evidence signature, freshness,
neutrality, then the policy rules) and every check yields a finding, so a
result's findings list is reproducible and its verdict can be re-derived by
anyone holding it.
"""

from __future__ import annotations

import enum
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from . import encoding
from .device import NONCE_SIZE, USAGE_PCR, manifest_digest, replay_chain
from .encoding import RandBytes
from .errors import (
    DecodeError,
    InvalidPolicy,
    MalformedEvidence,
    MalformedKey,
    NoEndorsement,
    StaleNonce,
    UnknownRuleKind,
)
from .evidence import (
    AttestationResult,
    ClaimKind,
    Endorsement,
    Evidence,
    Finding,
    Severity,
    verdict_for,
)

DEFAULT_FRESHNESS_WINDOW = 300
POLICY_FILE = "policy.json"

CHECK_SIGNATURE = "signature"
CHECK_FRESHNESS = "freshness"
CHECK_NEUTRALITY = "neutrality"
BUILTIN_CHECKS = (CHECK_SIGNATURE, CHECK_FRESHNESS, CHECK_NEUTRALITY)


class RuleKind(str, enum.Enum):
    REFERENCE_MATCH = "reference_match"
    KEY_HARDWARE_BOUND = "key_hardware_bound"
    GEOFENCE = "geofence"
    COUNTER_MIN = "counter_min"
    CONFIG_KNOWN = "config_known"
    NEUTRALITY = "neutrality"


def _number(params: dict, name: str) -> float:
    v = params.get(name)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InvalidPolicy(f"parameter {name!r} must be a number")
    return float(v)


def _check_params(kind: RuleKind, params: dict[str, Any]) -> None:
    if kind is RuleKind.GEOFENCE:
        lat_min, lat_max = _number(params, "lat_min"), _number(params, "lat_max")
        lon_min, lon_max = _number(params, "lon_min"), _number(params, "lon_max")
        if lat_min > lat_max or lon_min > lon_max:
            raise InvalidPolicy("geofence box is empty")
    elif kind is RuleKind.COUNTER_MIN:
        m = params.get("minimum")
        if isinstance(m, bool) or not isinstance(m, int) or m < 0:
            raise InvalidPolicy("counter_min needs a non-negative integer 'minimum'")
    elif kind is RuleKind.REFERENCE_MATCH:
        comps = params.get("components", "all")
        if comps != "all" and not (
            isinstance(comps, list) and comps and all(isinstance(c, str) for c in comps)
        ):
            raise InvalidPolicy("reference_match 'components' must be \"all\" or a list of names")
    elif kind is RuleKind.KEY_HARDWARE_BOUND:
        pk = params.get("public_key")
        if pk is not None:
            encoding.unb64url(pk)


@dataclass(frozen=True)
class Rule:
    rule_id: str
    severity: Severity
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "severity", Severity(self.severity))


@dataclass(frozen=True)
class AppraisalPolicy:
    verifier_id: str
    rules: list[Rule]
    freshness_window: int = DEFAULT_FRESHNESS_WINDOW

    def __post_init__(self):
        if isinstance(self.freshness_window, bool) or not isinstance(self.freshness_window, int) \
                or self.freshness_window <= 0:
            raise InvalidPolicy("freshness_window must be a positive integer")
        ids = [r.rule_id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise InvalidPolicy("rule ids must be unique")
        clash = set(ids) & set(BUILTIN_CHECKS)
        if clash:
            raise InvalidPolicy(f"rule ids {sorted(clash)} are reserved for built-in checks")
        for r in self.rules:
            try:
                kind = RuleKind(r.kind)
            except ValueError:
                raise UnknownRuleKind(f"unknown rule kind {r.kind!r}") from None
            _check_params(kind, r.params)

    @classmethod
    def load(cls, path) -> AppraisalPolicy:
        with open(path, "rb") as fh:
            return encoding.canonical_decode(fh.read(), cls)


def default_policy(verifier_id: str) -> AppraisalPolicy:
    return AppraisalPolicy(
        verifier_id=verifier_id,
        freshness_window=DEFAULT_FRESHNESS_WINDOW,
        rules=[
            Rule("config-reference", Severity.MANDATORY, RuleKind.REFERENCE_MATCH.value, {"components": "all"}),
            Rule("key-hardware-bound", Severity.MANDATORY, RuleKind.KEY_HARDWARE_BOUND.value),
            Rule("config-known", Severity.ADVISORY, RuleKind.CONFIG_KNOWN.value),
            Rule("usage-counter", Severity.ADVISORY, RuleKind.COUNTER_MIN.value, {"minimum": 0}),
        ],
    )


@dataclass(frozen=True)
class AppraisalContext:
    nonce: bytes
    nonce_issued_at: int
    endorsements: list[Endorsement]
    now: int

    def __post_init__(self):
        if len(self.nonce) != NONCE_SIZE:
            raise ValueError(f"nonce must be {NONCE_SIZE} bytes")


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------


def _safe_verify(obj, public_key: bytes) -> bool:
    try:
        return obj.verify(public_key)
    except MalformedKey:
        return False


def _config_claim(evidence: Evidence):
    """Return (components, problem) for the system_config claim, if any."""
    claim = evidence.claim(ClaimKind.SYSTEM_CONFIG)
    if claim is None:
        return None, None
    comps = claim.body.components
    try:
        if manifest_digest(comps) != evidence.quote.config_digest:
            return None, "system_config claim disagrees with the quoted config digest"
    except ValueError as exc:
        return None, f"system_config claim is malformed: {exc}"
    return {c.name: c.digest for c in comps}, None


def _reference_match(rule: Rule, evidence: Evidence, endorsement: Endorsement) -> tuple[bool, str]:
    ref = {c.name: c.digest for c in endorsement.reference_values}
    selected = rule.params.get("components", "all")
    claimed, problem = _config_claim(evidence)
    if problem:
        return False, problem
    if selected == "all":
        if evidence.quote.config_digest != manifest_digest(endorsement.reference_values):
            if claimed is None:
                return False, "quoted config digest differs from endorsed reference values"
            bad = sorted(n for n in set(ref) | set(claimed) if ref.get(n) != claimed.get(n))
            return False, "components differ from endorsed reference: " + ", ".join(bad)
        return True, f"all {len(ref)} components match endorsed reference values"
    if claimed is None:
        return False, "no system_config claim to compare selected components"
    bad = []
    for name in selected:
        if name not in ref:
            bad.append(f"{name} (not endorsed)")
        elif name not in claimed:
            bad.append(f"{name} (not reported)")
        elif claimed[name] != ref[name]:
            bad.append(f"{name} (digest mismatch)")
    if bad:
        return False, "components differ: " + ", ".join(bad)
    return True, f"{len(selected)} selected components match"


def _key_hardware_bound(rule: Rule, evidence: Evidence, endorsement: Endorsement) -> tuple[bool, str]:
    claim = evidence.claim(ClaimKind.KEY_PROVENANCE)
    if claim is None:
        return False, "no key_provenance claim"
    subjects = claim.body.subjects
    if not subjects:
        return False, "key_provenance claim names no keys"
    certified = []
    for handle in subjects:
        cert = evidence.certification(handle)
        if cert is None:
            return False, f"key {handle.hex()} has no certification"
        if cert.device_id != evidence.quote.device_id:
            return False, f"key {handle.hex()} certified by a different device"
        if not _safe_verify(cert, endorsement.ak_public):
            return False, f"certification of key {handle.hex()} not signed by the endorsed AK"
        a = cert.attributes
        if not (a.fixed_to_device and a.created_inside):
            return False, (
                f"key {handle.hex()} is not hardware-bound "
                f"(fixed_to_device={a.fixed_to_device}, created_inside={a.created_inside})"
            )
        certified.append(cert.subject_public)
    wanted = rule.params.get("public_key")
    if wanted is not None and encoding.unb64url(wanted) not in certified:
        return False, "required public key not among certified hardware-bound keys"
    return True, f"{len(subjects)} key(s) generated inside and fixed to the device"


def _geofence(rule: Rule, evidence: Evidence) -> tuple[bool, str]:
    claim = evidence.claim(ClaimKind.GEOLOCATION)
    if claim is None:
        return False, "no geolocation claim"
    pos = claim.body
    if pos != evidence.quote.geolocation:
        return False, "geolocation claim disagrees with the quote"
    p = rule.params
    inside = p["lat_min"] <= pos.latitude <= p["lat_max"] and p["lon_min"] <= pos.longitude <= p["lon_max"]
    where = f"({pos.latitude}, {pos.longitude})"
    if inside:
        return True, f"{where} inside lat [{p['lat_min']}, {p['lat_max']}] lon [{p['lon_min']}, {p['lon_max']}]"
    return False, f"{where} outside lat [{p['lat_min']}, {p['lat_max']}] lon [{p['lon_min']}, {p['lon_max']}]"


def _counter_min(rule: Rule, evidence: Evidence) -> tuple[bool, str]:
    quote = evidence.quote
    minimum = rule.params["minimum"]
    claim = evidence.claim(ClaimKind.KEY_USAGE_SEQUENCE)
    if claim is not None:
        body = claim.body
        entries = body.entries
        if [e.seq for e in entries] != list(range(body.start_seq, body.end_seq)):
            return False, "usage log excerpt is not consecutive"
        if body.start_seq == 0 and replay_chain(e.tx_digest for e in entries) != body.end_register:
            return False, "usage log excerpt does not replay to its end register"
        if quote.pcr(USAGE_PCR) != body.end_register:
            return False, "usage log end register differs from quoted PCR 16"
        if entries and entries[-1].counter_after > quote.counter:
            return False, "usage log runs ahead of the quoted counter"
    if quote.counter < minimum:
        return False, f"counter {quote.counter} < {minimum}"
    return True, f"counter {quote.counter} >= {minimum}"


def _config_known(evidence: Evidence, endorsement: Endorsement) -> tuple[bool, str]:
    claimed, problem = _config_claim(evidence)
    if problem:
        return False, problem
    if claimed is None:
        return False, "no system_config claim"
    ref = {c.name for c in endorsement.reference_values}
    unknown = sorted(set(claimed) - ref)
    missing = sorted(ref - set(claimed))
    if unknown or missing:
        parts = []
        if unknown:
            parts.append("unknown: " + ", ".join(unknown))
        if missing:
            parts.append("missing: " + ", ".join(missing))
        return False, "; ".join(parts)
    return True, f"composition of {len(ref)} components matches endorsement"


def _neutrality(verifier_id: str, endorsement: Endorsement) -> tuple[bool, str]:
    if verifier_id == endorsement.endorser_id:
        return False, f"verifier {verifier_id!r} appraising its own endorsement"
    return True, f"verifier {verifier_id!r} independent of endorser {endorsement.endorser_id!r}"


def evaluate_rule(
    rule: Rule,
    evidence: Evidence,
    endorsements: Sequence[Endorsement],
    verifier_id: str | None = None,
) -> Finding:
    """Evaluate one policy rule against evidence and the newest endorsement."""
    try:
        kind = RuleKind(rule.kind)
    except ValueError:
        raise UnknownRuleKind(f"unknown rule kind {rule.kind!r}") from None
    if not endorsements:
        raise NoEndorsement("rule evaluation needs an endorsement")
    endorsement = endorsements[0]
    if kind is RuleKind.REFERENCE_MATCH:
        passed, detail = _reference_match(rule, evidence, endorsement)
    elif kind is RuleKind.KEY_HARDWARE_BOUND:
        passed, detail = _key_hardware_bound(rule, evidence, endorsement)
    elif kind is RuleKind.GEOFENCE:
        passed, detail = _geofence(rule, evidence)
    elif kind is RuleKind.COUNTER_MIN:
        passed, detail = _counter_min(rule, evidence)
    elif kind is RuleKind.CONFIG_KNOWN:
        passed, detail = _config_known(evidence, endorsement)
    else:
        if verifier_id is None:
            raise InvalidPolicy("neutrality rule needs the verifier id")
        passed, detail = _neutrality(verifier_id, endorsement)
    return Finding(rule.rule_id, kind.value, rule.severity, passed, detail)


# ---------------------------------------------------------------------------
# appraisal
# ---------------------------------------------------------------------------


def _endorsements_for(evidence: Evidence, endorsements: Sequence[Endorsement]) -> list[Endorsement]:
    mine = [e for e in endorsements if e.device_id == evidence.quote.device_id]
    mine.sort(key=lambda e: (-e.issued_at, encoding.canonical_encode(e)))
    return mine


def evaluate(evidence: Evidence, ctx: AppraisalContext, policy: AppraisalPolicy) -> AttestationResult:
    """Pure appraisal: the unsigned result for ``evidence`` in ``ctx``."""
    if not isinstance(evidence, Evidence):
        raise MalformedEvidence(f"expected Evidence, got {type(evidence).__name__}")
    used = _endorsements_for(evidence, ctx.endorsements)
    if not used:
        raise NoEndorsement(f"no endorsement for device {evidence.quote.device_id.hex()}")
    endorsement = used[0]
    quote = evidence.quote
    mandatory = Severity.MANDATORY

    sig_ok = _safe_verify(quote, endorsement.ak_public) and _safe_verify(evidence, endorsement.ak_public)
    findings = [
        Finding(
            CHECK_SIGNATURE, CHECK_SIGNATURE, mandatory, sig_ok,
            "quote and evidence signed by the endorsed AK" if sig_ok
            else "signature does not verify under the endorsed AK",
        )
    ]

    age = ctx.now - ctx.nonce_issued_at
    if quote.nonce != ctx.nonce:
        fresh, detail = False, "quote answers a different nonce"
    elif age < 0:
        fresh, detail = False, f"nonce issued {-age}s in the future"
    elif age > policy.freshness_window:
        fresh, detail = False, f"evidence {age}s old exceeds window of {policy.freshness_window}s"
    else:
        fresh, detail = True, f"nonce matches, {age}s old within {policy.freshness_window}s"
    findings.append(Finding(CHECK_FRESHNESS, CHECK_FRESHNESS, mandatory, fresh, detail))

    neutral, detail = _neutrality(policy.verifier_id, endorsement)
    findings.append(Finding(CHECK_NEUTRALITY, CHECK_NEUTRALITY, mandatory, neutral, detail))

    for rule in policy.rules:
        findings.append(evaluate_rule(rule, evidence, used, policy.verifier_id))

    return AttestationResult(
        verifier_id=policy.verifier_id,
        device_id=quote.device_id,
        verdict=verdict_for(findings),
        findings=findings,
        nonce=ctx.nonce,
        issued_at=ctx.now,
    )


def appraise(
    evidence: Evidence,
    ctx: AppraisalContext,
    policy: AppraisalPolicy,
    signing_key: bytes,
    nonces: NonceTable | None = None,
) -> AttestationResult:
    """Appraise and sign. With ``nonces`` the context nonce is consumed first."""
    if nonces is not None:
        nonces.consume(ctx.nonce)
    return evaluate(evidence, ctx, policy).signed_with(signing_key)


def appraise_encoded(data: bytes, ctx: AppraisalContext, policy: AppraisalPolicy,
                     signing_key: bytes) -> AttestationResult:
    try:
        evidence = encoding.canonical_decode(data, Evidence)
    except (DecodeError, ValueError, TypeError) as exc:
        raise MalformedEvidence(str(exc)) from exc
    return appraise(evidence, ctx, policy, signing_key)


def verify_result(result: AttestationResult, verifier_public_key: bytes) -> bool:
    if not result.consistent():
        return False
    try:
        return result.verify(verifier_public_key)
    except MalformedKey:
        return False


# ---------------------------------------------------------------------------
# nonces and the verifier service object
# ---------------------------------------------------------------------------


class NonceTable:
    """Issued nonces, each consumable exactly once."""

    def __init__(self, rand: RandBytes | None = None, clock: Callable[[], float] = time.time):
        self._rand = rand or os.urandom
        self._clock = clock
        self._issued: dict[bytes, int] = {}
        self._consumed: set[bytes] = set()
        self._lock = threading.Lock()

    def issue(self) -> tuple[bytes, int]:
        with self._lock:
            while True:
                nonce = self._rand(NONCE_SIZE)
                if nonce not in self._issued and nonce not in self._consumed:
                    break
            issued_at = int(self._clock())
            self._issued[nonce] = issued_at
            return nonce, issued_at

    def issued_at(self, nonce: bytes) -> int:
        with self._lock:
            if nonce not in self._issued:
                raise StaleNonce("nonce unknown or already consumed")
            return self._issued[nonce]

    def consume(self, nonce: bytes) -> int:
        """Atomically retire ``nonce``; returns its issue time."""
        with self._lock:
            issued_at = self._issued.pop(bytes(nonce), None)
            if issued_at is None:
                raise StaleNonce("nonce unknown or already consumed")
            self._consumed.add(bytes(nonce))
            return issued_at


def issue_nonce(nonces: NonceTable) -> tuple[bytes, int]:
    return nonces.issue()


class Verifier:
    """A VASP acting as attestation verification provider."""

    def __init__(self, signing_key: bytes, policy: AppraisalPolicy, store,
                 nonces: NonceTable | None = None, clock: Callable[[], float] = time.time):
        self.signing_key = signing_key
        self.public_key = encoding.public_key_of(signing_key)
        self.policy = policy
        self.store = store
        self.clock = clock
        self.nonces = nonces or NonceTable(clock=clock)

    @property
    def verifier_id(self) -> str:
        return self.policy.verifier_id

    def issue_nonce(self) -> tuple[bytes, int]:
        return self.nonces.issue()

    def appraise(self, evidence: Evidence) -> AttestationResult:
        if not isinstance(evidence, Evidence):
            raise MalformedEvidence(f"expected Evidence, got {type(evidence).__name__}")
        endorsements = self.store.lookup(evidence.quote.device_id)
        if not endorsements:
            raise NoEndorsement(f"no endorsement for device {evidence.quote.device_id.hex()}")
        nonce = evidence.quote.nonce
        issued_at = self.nonces.consume(nonce)
        ctx = AppraisalContext(
            nonce=nonce, nonce_issued_at=issued_at, endorsements=endorsements, now=int(self.clock())
        )
        return appraise(evidence, ctx, self.policy, self.signing_key)
