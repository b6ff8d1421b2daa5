"""VASP managed-compliance services.

Customer accounts with Travel Rule party data, key certificates chained to
the VASP root, beneficiary lookup, and reconciliation of a wallet's
key-usage log against the confirmed ledger.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Sequence

from . import encoding
from .device import ZERO_PCR, UsageLogEntry, replay_chain
from .errors import (
    DuplicateKey,
    GappedLog,
    InvalidValidity,
    UnknownAccount,
    UnregisteredKey,
    ValidationFailed,
)
from .evidence import SimpleCertificate, make_certificate
from .ledger import ConfirmedLedger

ACCOUNTS_FILE = "accounts.json"


# ---------------------------------------------------------------------------
# Travel Rule data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Institution:
    name: str
    address: str
    numerical_id: str


@dataclass(frozen=True)
class TravelRulePartyData:
    """The customer-side subset of Travel Rule data a VASP holds per account."""

    name: str
    account: str
    address: str
    institution: Institution | None


@dataclass(frozen=True)
class TravelRuleRecord:
    originator_name: str
    originator_account: str
    originator_address: str
    amount: str  # "<positive decimal> <asset code>"
    execution_date: int | None
    beneficiary_institution: str
    beneficiary_name: str
    beneficiary_address: str
    beneficiary_account: str
    originator_institution: Institution | None


def _check_text(value) -> str | None:
    if value is None or (isinstance(value, str) and not value.strip()):
        return "empty"
    if not isinstance(value, str):
        return "not text"
    return None


def _check_amount(value) -> str | None:
    problem = _check_text(value)
    if problem:
        return problem
    parts = value.replace("−", "-").split()
    try:
        number = Decimal(parts[0])
    except InvalidOperation:
        return "not a decimal"
    if not number.is_finite():
        return "not a decimal"
    if number <= 0:
        return "not positive"
    if len(parts) < 2:
        return "missing asset code"
    if len(parts) > 2:
        return "trailing text after asset code"
    return None


def _check_date(value) -> str | None:
    if value is None:
        return "empty"
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        return "not a valid epoch timestamp"
    return None


def _check_institution(value) -> str | None:
    if value is None:
        return "empty"
    fields = {"name": value.name, "address": value.address, "numerical_id": value.numerical_id}
    blank = [k for k, v in fields.items() if _check_text(v)]
    if len(blank) == len(fields):
        return "empty"
    if blank:
        return "incomplete (" + ", ".join(blank) + ")"
    if not value.numerical_id.strip().isdigit():
        return "numerical_id not numeric"
    return None


_RECORD_CHECKS = {
    "originator_name": _check_text,
    "originator_account": _check_text,
    "originator_address": _check_text,
    "amount": _check_amount,
    "execution_date": _check_date,
    "beneficiary_institution": _check_text,
    "beneficiary_name": _check_text,
    "beneficiary_address": _check_text,
    "beneficiary_account": _check_text,
    "originator_institution": _check_institution,
}

_PARTY_CHECKS = {
    "name": _check_text,
    "account": _check_text,
    "address": _check_text,
    "institution": _check_institution,
}


def validate_party(record: TravelRuleRecord | TravelRulePartyData) -> list[str]:
    """Return one ``"field: reason"`` string per invalid field; empty when valid."""
    checks = _PARTY_CHECKS if isinstance(record, TravelRulePartyData) else _RECORD_CHECKS
    violations = []
    for name, check in checks.items():
        problem = check(getattr(record, name))
        if problem:
            violations.append(f"{name}: {problem}")
    return violations


# ---------------------------------------------------------------------------
# accounts
# ---------------------------------------------------------------------------


class AccountStatus(str, enum.Enum):
    ACTIVE = "active"
    SUSPENDED = "suspended"


@dataclass(frozen=True)
class RegisteredKey:
    public_key: bytes
    device_id: bytes
    registered_at: int


@dataclass
class CustomerAccount:
    account_id: str
    customer: TravelRulePartyData
    registered_keys: list[RegisteredKey] = field(default_factory=list)
    status: AccountStatus = AccountStatus.ACTIVE

    def has_key(self, public_key: bytes) -> bool:
        return any(k.public_key == public_key for k in self.registered_keys)


def account_id_for(customer: TravelRulePartyData) -> str:
    return "acct-" + hashlib.sha256(encoding.canonical_encode(customer)).hexdigest()[:16]


class AccountStore:
    """Customer accounts and the key → account index (one account per key)."""

    def __init__(self, path: str | os.PathLike | None = None):
        self._path = Path(path) if path is not None else None
        self._accounts: dict[str, CustomerAccount] = {}
        self._by_key: dict[bytes, str] = {}
        self._lock = threading.RLock()
        if self._path is not None and self._path.exists():
            for acct in encoding.canonical_decode(self._path.read_bytes(), list[CustomerAccount]):
                self._accounts[acct.account_id] = acct
                for k in acct.registered_keys:
                    self._by_key[k.public_key] = acct.account_id

    @classmethod
    def in_directory(cls, directory: str | os.PathLike) -> AccountStore:
        return cls(Path(directory) / ACCOUNTS_FILE)

    def _flush(self) -> None:
        if self._path is None:
            return
        tmp = self._path.with_name(self._path.name + ".tmp")
        tmp.write_bytes(encoding.canonical_encode(sorted(self._accounts.values(), key=lambda a: a.account_id)))
        os.replace(tmp, self._path)

    def get(self, account_id: str) -> CustomerAccount:
        try:
            return self._accounts[account_id]
        except KeyError:
            raise UnknownAccount(f"no account {account_id!r}") from None

    def account_for_key(self, public_key: bytes) -> CustomerAccount | None:
        acct_id = self._by_key.get(public_key)
        return self._accounts.get(acct_id) if acct_id else None

    def accounts(self) -> list[CustomerAccount]:
        return list(self._accounts.values())

    def register(self, customer: TravelRulePartyData, key: bytes, device_id: bytes,
                 account_id: str | None = None, now: int | None = None) -> CustomerAccount:
        violations = validate_party(customer)
        if violations:
            raise ValidationFailed(violations)
        account_id = account_id or account_id_for(customer)
        with self._lock:
            owner = self._by_key.get(key)
            if owner is not None:
                raise DuplicateKey(f"key already registered to {owner}")
            acct = self._accounts.get(account_id)
            if acct is None:
                acct = CustomerAccount(account_id, customer)
                self._accounts[account_id] = acct
            elif acct.customer != customer:
                raise ValidationFailed([f"account_id: {account_id} belongs to a different customer"])
            registered_at = int(time.time()) if now is None else now
            acct.registered_keys.append(RegisteredKey(bytes(key), bytes(device_id), registered_at))
            self._by_key[bytes(key)] = account_id
            self._flush()
            return acct

    def set_status(self, account_id: str, status: AccountStatus) -> None:
        with self._lock:
            self.get(account_id).status = AccountStatus(status)
            self._flush()

    def suspend(self, account_id: str) -> None:
        self.set_status(account_id, AccountStatus.SUSPENDED)


def register_account(store: AccountStore, customer: TravelRulePartyData, key: bytes,
                     device_id: bytes, **kwargs) -> CustomerAccount:
    return store.register(customer, key, device_id, **kwargs)


def beneficiary_lookup(store: AccountStore, public_key: bytes) -> TravelRulePartyData | None:
    """Party data for a beneficiary key, or ``None`` when the VASP cannot vouch for it."""
    acct = store.account_for_key(public_key)
    if acct is None or acct.status is not AccountStatus.ACTIVE:
        return None
    return acct.customer


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VaspAuthority:
    name: str
    signing_key: bytes = field(repr=False)
    root: SimpleCertificate

    @classmethod
    def create(cls, name: str, signing_key: bytes, not_before: int, not_after: int) -> VaspAuthority:
        pub = encoding.public_key_of(signing_key)
        root = make_certificate(pub, name, name, signing_key, not_before, not_after)
        return cls(name, signing_key, root)


def leaf_subject_name(account_id: str) -> str:
    return f"account:{account_id}"


def issue_key_certificate(
    authority: VaspAuthority,
    account: CustomerAccount,
    key: bytes,
    validity: tuple[int, int],
) -> list[SimpleCertificate]:
    """Certify a registered transaction key. Returns ``[leaf, root]``."""
    if not account.has_key(key):
        raise UnregisteredKey(f"key not registered to {account.account_id}")
    if account.status is not AccountStatus.ACTIVE:
        raise ValidationFailed([f"account: {account.account_id} is {account.status.value}"])
    not_before, not_after = validity
    root = authority.root
    if not_after < not_before:
        raise InvalidValidity("validity ends before it begins")
    if not_before < root.not_before or not_after > root.not_after:
        raise InvalidValidity("validity must nest inside the root certificate's window")
    leaf = make_certificate(
        key, leaf_subject_name(account.account_id), authority.name,
        authority.signing_key, not_before, not_after,
    )
    return [leaf, root]


# ---------------------------------------------------------------------------
# reconciliation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReconciliationReport:
    device_id: bytes
    checked_range: tuple[int, int]
    chain_ok: bool
    matched: list[tuple[int, int]]
    missing_on_ledger: list[int]
    unknown_on_ledger: list[int]
    order_mismatches: list[tuple[int, int]]

    @property
    def clean(self) -> bool:
        return (self.chain_ok and not self.missing_on_ledger
                and not self.unknown_on_ledger and not self.order_mismatches)


def inversions(matched: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """Pairs ``(seq_a, seq_b)`` with ``seq_a < seq_b`` confirmed in the opposite order."""
    seen: list[tuple[int, int]] = []  # (position, seq), kept sorted
    pairs = []
    for seq, pos in sorted(matched):
        cut = bisect.bisect_right(seen, (pos, float("inf")))
        pairs.extend((earlier, seq) for _, earlier in seen[cut:])
        bisect.insort(seen, (pos, seq))
    return sorted(pairs)


def reconcile(
    usage_log: Sequence[UsageLogEntry],
    quoted_pcr16: bytes,
    ledger: ConfirmedLedger,
    public_key: bytes,
    device_id: bytes = b"",
    start_register: bytes = ZERO_PCR,
) -> ReconciliationReport:
    """Compare signing order (usage log) with confirmation order (ledger).

    ``start_register`` is the PCR 16 value before the first entry, which is
    all zeros when the log starts at seq 0.
    """
    seqs = [e.seq for e in usage_log]
    if seqs and seqs != list(range(seqs[0], seqs[0] + len(seqs))):
        raise GappedLog("usage log seq values are not consecutive")
    start = seqs[0] if seqs else 0
    end = start + len(seqs)
    chain_ok = replay_chain((e.tx_digest for e in usage_log), start_register) == quoted_pcr16

    on_ledger = ledger.query_by_key(public_key)
    position_of = {digest: pos for pos, digest in on_ledger}
    matched, missing = [], []
    for e in usage_log:
        pos = position_of.get(e.tx_digest)
        if pos is None:
            missing.append(e.seq)
        else:
            matched.append((e.seq, pos))
    logged = {e.tx_digest for e in usage_log}
    unknown = [pos for pos, digest in on_ledger if digest not in logged]
    return ReconciliationReport(
        device_id=device_id,
        checked_range=(start, end),
        chain_ok=chain_ok,
        matched=matched,
        missing_on_ledger=missing,
        unknown_on_ledger=unknown,
        order_mismatches=inversions(matched),
    )


def format_report(report: ReconciliationReport) -> str:
    """Plain-text table for terminals."""
    pos_of = dict(report.matched)
    inverted = {s for pair in report.order_mismatches for s in pair}
    lines = [
        f"device      {report.device_id.hex() or '-'}",
        f"range       seq {report.checked_range[0]}..{report.checked_range[1]} (exclusive)",
        f"chain       {'ok' if report.chain_ok else 'MISMATCH with quoted PCR 16'}",
        "",
        f"{'seq':>5}  {'ledger pos':>10}  note",
    ]
    for seq in range(*report.checked_range):
        pos = pos_of.get(seq)
        note = "missing on ledger" if pos is None else ("out of order" if seq in inverted else "")
        lines.append(f"{seq:>5}  {'-' if pos is None else pos:>10}  {note}".rstrip())
    for pos in report.unknown_on_ledger:
        lines.append(f"{'?':>5}  {pos:>10}  on ledger, not in wallet log")
    if report.order_mismatches:
        lines.append("")
        lines.append("inverted pairs: " + ", ".join(f"({a},{b})" for a, b in report.order_mismatches))
    return "\n".join(lines)
