"""Exception hierarchy.

Every error carries a machine-readable ``code`` (the class name) so the
verifier service can put it on the wire and clients can rebuild it.
"""

from __future__ import annotations


class AttestationError(Exception):
    code = "AttestationError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        cls.code = cls.__name__


# encoding / crypto
class DecodeError(AttestationError, ValueError):
    pass


class MalformedKey(AttestationError, ValueError):
    pass


# hardware emulator
class InvalidGeolocation(AttestationError, ValueError):
    pass


class EmptyManifest(AttestationError, ValueError):
    pass


class InvalidManifest(AttestationError, ValueError):
    pass


class UnknownParent(AttestationError, KeyError):
    pass


class UnknownHandle(AttestationError, KeyError):
    pass


class InvalidAttributes(AttestationError, ValueError):
    pass


class ExportDenied(AttestationError, PermissionError):
    pass


class KeyUsageDenied(AttestationError, PermissionError):
    pass


class IndexOutOfRange(AttestationError, IndexError):
    pass


class BadNonce(AttestationError, ValueError):
    pass


# evidence / endorsements / appraisal
class UnknownClaimKind(AttestationError, ValueError):
    pass


class UnverifiedEndorsement(AttestationError):
    pass


class InvalidProvisioningRecord(AttestationError, ValueError):
    pass


class StaleNonce(AttestationError):
    pass


class NoEndorsement(AttestationError):
    pass


class MalformedEvidence(AttestationError, ValueError):
    pass


class UnknownRuleKind(AttestationError, ValueError):
    pass


class InvalidPolicy(AttestationError, ValueError):
    pass


# compliance
class ValidationFailed(AttestationError, ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class DuplicateKey(AttestationError):
    pass


class UnregisteredKey(AttestationError, KeyError):
    pass


class UnknownAccount(AttestationError, KeyError):
    pass


class InvalidValidity(AttestationError, ValueError):
    pass


class GappedLog(AttestationError, ValueError):
    pass


# ledger
class BadSignature(AttestationError):
    pass


class DigestMismatch(AttestationError, ValueError):
    pass


class DuplicateTx(AttestationError):
    pass


# protocol / relying party
class TransportFailure(AttestationError, ConnectionError):
    pass


class ProtocolError(AttestationError):
    pass


class Uninsurable(AttestationError):
    pass


class UnverifiedResult(AttestationError):
    pass


def error_for_code(code: str) -> type[AttestationError]:
    """Map a wire error code back to its exception class."""
    stack = list(AttestationError.__subclasses__())
    while stack:
        cls = stack.pop()
        if cls.code == code:
            return cls
        stack.extend(cls.__subclasses__())
    return ProtocolError
