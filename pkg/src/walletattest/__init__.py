"""Hardware-rooted attestation for cryptocurrency wallets.

The package emulates wallet hardware (PCRs, counter, non-migrateable keys),
models signed evidence and endorsements, runs a neutral verifier, and adds
the VASP-side pieces: Travel Rule records, key certificates, ledger
reconciliation and insurer risk scoring.
"""

from .appraisal import AppraisalContext, AppraisalPolicy, NonceTable, Rule, Verifier, appraise, default_policy, evaluate, verify_result
from .compliance import AccountStore, TravelRulePartyData, TravelRuleRecord, reconcile, validate_party
from .device import DeviceState, GeoPosition, KeyAttributes, Quote, provision_device
from .endorsement import EndorsementStore, issue_endorsement
from .errors import AttestationError
from .evidence import AttestationResult, ClaimKind, Endorsement, Evidence, Finding, Verdict, build_evidence
from .ledger import ConfirmedLedger, LedgerTx
from .risk import RiskInputs, assess_risk

__version__ = "0.1.0"

__all__ = [
    "AccountStore", "AppraisalContext", "AppraisalPolicy", "AttestationError", "AttestationResult",
    "ClaimKind", "ConfirmedLedger", "DeviceState", "Endorsement", "EndorsementStore", "Evidence",
    "Finding", "GeoPosition", "KeyAttributes", "LedgerTx", "NonceTable", "Quote", "RiskInputs",
    "Rule", "TravelRulePartyData", "TravelRuleRecord", "Verdict", "Verifier", "appraise",
    "assess_risk", "build_evidence", "default_policy", "evaluate", "issue_endorsement",
    "provision_device", "reconcile", "validate_party", "verify_result",
]
