"""Relying-party risk assessment (an asset insurer scoring a wallet)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from typing import Mapping

from . import encoding
from .appraisal import RuleKind, verify_result
from .errors import Uninsurable, UnverifiedResult
from .evidence import AttestationResult, Severity, Verdict

WEIGHTS_FILE = "weights.json"


class Factor(str, enum.Enum):
    HARDWARE_TYPE = "hardware_type"
    HARDWARE_GENUINENESS = "hardware_genuineness"
    HOST_SYSTEM_CLASS = "host_system_class"
    KNOWN_WEAKNESS_HISTORY = "known_weakness_history"
    ASSET_VALUE = "asset_value"


FACTORS = tuple(f.value for f in Factor)

DEFAULT_WEIGHTS = {f: 1 for f in FACTORS}

DEFAULT_HARDWARE_TYPE_SCORES = {
    "secure_element": 0,
    "tpm2": 10,
    "hsm": 0,
    "tee": 25,
    "tpm12": 30,
    "virtual": 80,
    "software": 100,
}

DEFAULT_HOST_CLASS_SCORES = {
    "dedicated_wallet": 0,
    "enterprise_server": 10,
    "mobile": 30,
    "desktop": 50,
    "unknown": 100,
}

# (upper bound exclusive, score); values at or above the last bound score 100
DEFAULT_ASSET_BUCKETS = ((1_000, 0), (10_000, 20), (100_000, 40), (1_000_000, 70))

WEAKNESS_SCORE_PER_INCIDENT = 20

GENUINE_PASS = 0
GENUINE_ADVISORY_FAIL = 60
GENUINE_NO_EVIDENCE = 100


@dataclass(frozen=True)
class RiskConfig:
    hardware_type_scores: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_HARDWARE_TYPE_SCORES))
    host_class_scores: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_HOST_CLASS_SCORES))
    asset_buckets: tuple[tuple[int, int], ...] = DEFAULT_ASSET_BUCKETS
    weakness_step: int = WEAKNESS_SCORE_PER_INCIDENT


@dataclass(frozen=True)
class RiskInputs:
    hardware_type: str
    asset_value: str  # decimal string
    weakness_history: int = 0
    host_system_class: str = "unknown"


@dataclass(frozen=True)
class RiskAssessment:
    device_id: bytes
    score: int
    factor_scores: dict[str, int]
    inputs_digest: bytes


def _clamp(v: int) -> int:
    return max(0, min(100, v))


def combine(factor_scores: Mapping[str, int], weights: Mapping[str, float]) -> int:
    """round(sum(w*f) / sum(w)), half-up, clamped to 0..100."""
    total_w = Decimal(0)
    acc = Decimal(0)
    for name in FACTORS:
        w = Decimal(str(weights.get(name, 0)))
        if w < 0:
            raise ValueError(f"weight for {name} is negative")
        total_w += w
        acc += w * Decimal(int(factor_scores[name]))
    if total_w == 0:
        raise ValueError("weights sum to zero")
    return _clamp(int((acc / total_w).quantize(Decimal(1), rounding=ROUND_HALF_UP)))


def asset_value_score(value: str, buckets=DEFAULT_ASSET_BUCKETS) -> int:
    try:
        amount = Decimal(str(value))
    except InvalidOperation:
        raise ValueError(f"asset value {value!r} is not a decimal") from None
    if not amount.is_finite() or amount < 0:
        raise ValueError("asset value must be a finite non-negative decimal")
    for bound, score in buckets:
        if amount < bound:
            return score
    return 100


def genuineness_score(result: AttestationResult) -> int:
    """0 when a hardware-binding rule passed, 60 on an advisory failure, 100 with no such rule."""
    hw = [f for f in result.findings if f.kind == RuleKind.KEY_HARDWARE_BOUND.value]
    if not hw:
        return GENUINE_NO_EVIDENCE
    if all(f.passed for f in hw):
        return GENUINE_PASS
    if all(f.passed or f.severity == Severity.ADVISORY for f in hw):
        return GENUINE_ADVISORY_FAIL
    # a failed mandatory binding rule makes the verdict contraindicated; unreachable here
    return GENUINE_NO_EVIDENCE


def factor_scores_for(result: AttestationResult, inputs: RiskInputs, config: RiskConfig) -> dict[str, int]:
    try:
        hw = config.hardware_type_scores[inputs.hardware_type]
    except KeyError:
        raise ValueError(f"unknown hardware type {inputs.hardware_type!r}") from None
    try:
        host = config.host_class_scores[inputs.host_system_class]
    except KeyError:
        raise ValueError(f"unknown host system class {inputs.host_system_class!r}") from None
    if inputs.weakness_history < 0:
        raise ValueError("weakness history count cannot be negative")
    return {
        Factor.HARDWARE_TYPE.value: _clamp(hw),
        Factor.HARDWARE_GENUINENESS.value: genuineness_score(result),
        Factor.HOST_SYSTEM_CLASS.value: _clamp(host),
        Factor.KNOWN_WEAKNESS_HISTORY.value: _clamp(inputs.weakness_history * config.weakness_step),
        Factor.ASSET_VALUE.value: asset_value_score(inputs.asset_value, config.asset_buckets),
    }


def assess_risk(
    result: AttestationResult,
    verifier_public_key: bytes,
    inputs: RiskInputs,
    weights: Mapping[str, float] | None = None,
    config: RiskConfig | None = None,
) -> RiskAssessment:
    if not verify_result(result, verifier_public_key):
        raise UnverifiedResult("attestation result does not verify under the verifier key")
    if result.verdict == Verdict.CONTRAINDICATED:
        raise Uninsurable("verifier contraindicated this wallet")
    config = config or RiskConfig()
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    scores = factor_scores_for(result, inputs, config)
    digest = encoding.digest_of({"result": result, "inputs": inputs, "weights": weights})
    return RiskAssessment(
        device_id=result.device_id,
        score=combine(scores, weights),
        factor_scores=scores,
        inputs_digest=digest,
    )


def load_weights(path) -> dict[str, float]:
    with open(path, "rb") as fh:
        raw = encoding.loads_json(fh.read())
    if not isinstance(raw, dict) or set(raw) - set(FACTORS):
        raise ValueError(f"weights file must map factor names {FACTORS} to numbers")
    return {**DEFAULT_WEIGHTS, **raw}
