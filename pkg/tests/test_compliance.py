from __future__ import annotations

import dataclasses
import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from walletattest import encoding
from walletattest.compliance import (
    AccountStatus,
    AccountStore,
    Institution,
    TravelRulePartyData,
    TravelRuleRecord,
    VaspAuthority,
    beneficiary_lookup,
    format_report,
    inversions,
    issue_key_certificate,
    reconcile,
    register_account,
    validate_party,
)
from walletattest.device import UsageLogEntry
from walletattest.errors import DuplicateKey, GappedLog, InvalidValidity, UnregisteredKey, ValidationFailed
from walletattest.evidence import verify_chain
from walletattest.ledger import ConfirmedLedger, LedgerTx

from .conftest import ref_sha256

ORIGIN_VASP = Institution("Example VASP", "2 Market St, Boston MA", "12345678")
CUSTOMER = TravelRulePartyData("Alice Example", "ALICE-0001", "1 Main St", ORIGIN_VASP)


def full_record(**changes) -> TravelRuleRecord:
    base = TravelRuleRecord(
        originator_name="Alice Example",
        originator_account="ALICE-0001",
        originator_address="1 Main St, Cambridge MA",
        amount="1.5 BTC-equivalent",
        execution_date=1_700_000_000,
        beneficiary_institution="Other VASP",
        beneficiary_name="Bob Example",
        beneficiary_address="9 Elm St, Austin TX",
        beneficiary_account="BOB-42",
        originator_institution=ORIGIN_VASP,
    )
    return dataclasses.replace(base, **changes)


def empty_value(field: dataclasses.Field):
    return None if field.name in ("execution_date", "originator_institution") else ""


def single_field_empty_mutants():
    """(field_name, record) for each of the ten fields blanked in turn."""
    return [(f.name, full_record(**{f.name: empty_value(f)})) for f in dataclasses.fields(TravelRuleRecord)]


# ---------------------------------------------------------------------------
# reconciliation oracle
# ---------------------------------------------------------------------------


def brute_force_inversions(matched):
    out = set()
    for sa, pa in matched:
        for sb, pb in matched:
            if sa < sb and pa > pb:
                out.add((sa, sb))
    return sorted(out)


def ref_chain(digests):
    v = bytes(32)
    for d in digests:
        v = ref_sha256(v, d)
    return v


def signed_log(rng: random.Random, n: int):
    """A usage log of n signed transactions and the LedgerTx for each."""
    priv, pub = encoding.generate_keypair(lambda k: rng.randbytes(k))
    log, txs = [], []
    for i in range(n):
        payload = rng.randbytes(12) + bytes([i])
        tx = LedgerTx.create(payload, pub, encoding.sign_body(payload, priv))
        log.append(UsageLogEntry(i, tx.tx_digest, i + 1))
        txs.append(tx)
    return pub, log, txs


def reconcile_trial(rng: random.Random) -> list[str]:
    """One random log/permutation trial; returns a list of discrepancies."""
    n = rng.randint(0, 20)
    pub, log, txs = signed_log(rng, n)
    confirmed = [t for t in txs if rng.random() > 0.15]
    rng.shuffle(confirmed)
    ledger = ConfirmedLedger()
    for t in confirmed:
        ledger.submit(t)
    rpt = reconcile(log, ref_chain(e.tx_digest for e in log), ledger, pub)
    problems = []
    pos = {t.tx_digest: i for i, t in enumerate(confirmed)}
    want_matched = [(e.seq, pos[e.tx_digest]) for e in log if e.tx_digest in pos]
    if rpt.matched != want_matched:
        problems.append("matched differs")
    if rpt.order_mismatches != brute_force_inversions(want_matched):
        problems.append(f"order_mismatches {rpt.order_mismatches} != brute force")
    if len(rpt.matched) + len(rpt.missing_on_ledger) != n:
        problems.append("matched + missing does not cover the range")
    if not rpt.chain_ok:
        problems.append("chain_ok false on an intact log")
    return problems


def mutation_trial(rng: random.Random) -> bool:
    """True iff altering one tx digest in the log makes chain_ok false."""
    pub, log, _ = signed_log(rng, rng.randint(1, 20))
    pcr16 = ref_chain(e.tx_digest for e in log)
    i = rng.randrange(len(log))
    d = bytearray(log[i].tx_digest)
    d[rng.randrange(32)] ^= 1 << rng.randrange(8)
    mutated = list(log)
    mutated[i] = dataclasses.replace(log[i], tx_digest=bytes(d))
    return not reconcile(mutated, pcr16, ConfirmedLedger(), pub).chain_ok


class TestTravelRule:
    def test_complete_record(self):
        assert validate_party(full_record()) == []

    def test_beneficiary_account_empty(self):
        assert validate_party(full_record(beneficiary_account="")) == ["beneficiary_account: empty"]

    @pytest.mark.parametrize("amount", ["−3", "-3", "0 BTC", "-0.1 ETH"])
    def test_amount_not_positive(self, amount):
        assert validate_party(full_record(amount=amount)) == ["amount: not positive"]

    @pytest.mark.parametrize("amount,reason", [("abc BTC", "not a decimal"), ("5", "missing asset code"),
                                               ("NaN BTC", "not a decimal")])
    def test_amount_shape(self, amount, reason):
        assert validate_party(full_record(amount=amount)) == [f"amount: {reason}"]

    def test_each_single_empty_field_named_once(self):
        mutants = single_field_empty_mutants()
        assert len(mutants) == 10
        for name, rec in mutants:
            assert validate_party(rec) == [f"{name}: empty"]

    def test_whitespace_counts_as_empty(self):
        assert validate_party(full_record(originator_name="   ")) == ["originator_name: empty"]

    def test_institution_partial(self):
        rec = full_record(originator_institution=Institution("X", "", "12"))
        assert validate_party(rec) == ["originator_institution: incomplete (address)"]
        rec = full_record(originator_institution=Institution("X", "Y", "twelve"))
        assert validate_party(rec) == ["originator_institution: numerical_id not numeric"]

    def test_party_data(self):
        assert validate_party(CUSTOMER) == []
        assert validate_party(dataclasses.replace(CUSTOMER, account="")) == ["account: empty"]


class TestAccounts:
    def test_register(self, rand):
        store = AccountStore()
        acct = register_account(store, CUSTOMER, rand(32), rand(16), now=5)
        assert len(acct.registered_keys) == 1
        assert acct.status is AccountStatus.ACTIVE
        assert acct.account_id.startswith("acct-")

    def test_duplicate_key(self, rand):
        store = AccountStore()
        key = rand(32)
        store.register(CUSTOMER, key, rand(16))
        other = dataclasses.replace(CUSTOMER, name="Carol", account="C-1")
        with pytest.raises(DuplicateKey):
            store.register(other, key, rand(16))

    def test_second_key_same_account(self, rand):
        store = AccountStore()
        a = store.register(CUSTOMER, rand(32), rand(16))
        b = store.register(CUSTOMER, rand(32), rand(16))
        assert a.account_id == b.account_id and len(b.registered_keys) == 2

    def test_invalid_customer(self, rand):
        with pytest.raises(ValidationFailed) as info:
            AccountStore().register(dataclasses.replace(CUSTOMER, address=""), rand(32), rand(16))
        assert info.value.violations == ["address: empty"]

    def test_persistence(self, rand, tmp_path):
        store = AccountStore.in_directory(tmp_path)
        key = rand(32)
        acct = store.register(CUSTOMER, key, rand(16), now=7)
        store.suspend(acct.account_id)
        again = AccountStore.in_directory(tmp_path)
        assert again.account_for_key(key) == again.get(acct.account_id)
        assert again.get(acct.account_id).status is AccountStatus.SUSPENDED

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5)), max_size=30))
    def test_key_account_bijection(self, ops):
        store = AccountStore()
        customers = [dataclasses.replace(CUSTOMER, account=f"A{i}") for i in range(4)]
        for who, k in ops:
            try:
                store.register(customers[who], bytes([k]) * 32, bytes(16))
            except DuplicateKey:
                pass
        owners = {}
        for acct in store.accounts():
            for rk in acct.registered_keys:
                assert rk.public_key not in owners
                owners[rk.public_key] = acct.account_id
        for key, acct_id in owners.items():
            assert store.account_for_key(key).account_id == acct_id


class TestLookup:
    def test_found(self, rand):
        store = AccountStore()
        key = rand(32)
        store.register(CUSTOMER, key, rand(16))
        assert beneficiary_lookup(store, key) == CUSTOMER

    def test_unknown(self, rand):
        assert beneficiary_lookup(AccountStore(), rand(32)) is None

    def test_suspended(self, rand):
        store = AccountStore()
        key = rand(32)
        acct = store.register(CUSTOMER, key, rand(16))
        store.suspend(acct.account_id)
        assert beneficiary_lookup(store, key) is None


class TestCertificates:
    @pytest.fixture
    def setup(self, rand):
        store = AccountStore()
        key = rand(32)
        acct = store.register(CUSTOMER, key, rand(16))
        authority = VaspAuthority.create("Example VASP Root", encoding.generate_keypair(rand)[0], 1000, 9000)
        return store, acct, key, authority

    def test_chain(self, setup):
        store, acct, key, authority = setup
        leaf, root = issue_key_certificate(authority, acct, key, (2000, 3000))
        assert verify_chain([leaf, root], trusted_roots=[authority.root.subject_public_key])
        assert leaf.subject_name == f"account:{acct.account_id}"
        assert leaf.subject_public_key == key
        assert root.subject_name == "Example VASP Root" and root.self_signed

    def test_unregistered(self, setup, rand):
        _, acct, _, authority = setup
        with pytest.raises(UnregisteredKey):
            issue_key_certificate(authority, acct, rand(32), (2000, 3000))

    def test_validity_past_root(self, setup):
        _, acct, key, authority = setup
        with pytest.raises(InvalidValidity):
            issue_key_certificate(authority, acct, key, (2000, 9001))
        with pytest.raises(InvalidValidity):
            issue_key_certificate(authority, acct, key, (999, 3000))

    def test_suspended_account(self, setup):
        store, acct, key, authority = setup
        store.suspend(acct.account_id)
        with pytest.raises(ValidationFailed):
            issue_key_certificate(authority, store.get(acct.account_id), key, (2000, 3000))

    @settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(1000, 9000), st.integers(0, 8000))
    def test_issued_chains_always_verify(self, setup, nb, span):
        _, acct, key, authority = setup
        na = min(nb + span, 9000)
        assert verify_chain(issue_key_certificate(authority, acct, key, (nb, na)))


class TestReconcile:
    def _setup(self, n, order, rng_seed=0):
        rng = random.Random(rng_seed)
        pub, log, txs = signed_log(rng, n)
        ledger = ConfirmedLedger()
        for i in order:
            ledger.submit(txs[i])
        return pub, log, ledger

    def test_identity_order(self):
        pub, log, ledger = self._setup(3, [0, 1, 2])
        rpt = reconcile(log, ref_chain(e.tx_digest for e in log), ledger, pub)
        assert rpt.chain_ok and len(rpt.matched) == 3 and rpt.order_mismatches == []
        assert rpt.clean

    def test_swapped_confirmation(self):
        pub, log, ledger = self._setup(3, [0, 2, 1])
        rpt = reconcile(log, ref_chain(e.tx_digest for e in log), ledger, pub)
        assert rpt.order_mismatches == [(1, 2)]
        assert "inverted pairs: (1,2)" in format_report(rpt)

    def test_missing(self):
        pub, log, ledger = self._setup(2, [0])
        rpt = reconcile(log, ref_chain(e.tx_digest for e in log), ledger, pub)
        assert rpt.missing_on_ledger == [1]

    def test_unknown_on_ledger(self):
        pub, log, ledger = self._setup(3, [0, 1, 2])
        rpt = reconcile(log[:2], ref_chain(e.tx_digest for e in log[:2]), ledger, pub)
        assert rpt.unknown_on_ledger == [2]

    def test_gapped(self):
        pub, log, ledger = self._setup(3, [])
        with pytest.raises(GappedLog):
            reconcile([log[0], log[2]], bytes(32), ledger, pub)

    def test_partial_range(self):
        pub, log, ledger = self._setup(4, [0, 1, 2, 3])
        start = ref_chain(e.tx_digest for e in log[:2])
        rpt = reconcile(log[2:], ref_chain(e.tx_digest for e in log), ledger, pub, start_register=start)
        assert rpt.chain_ok and rpt.checked_range == (2, 4)
        assert rpt.unknown_on_ledger == [0, 1]

    def test_random_against_brute_force(self):
        rng = random.Random(2024)
        for _ in range(100):
            assert reconcile_trial(rng) == []

    def test_single_digest_mutation(self):
        rng = random.Random(77)
        assert all(mutation_trial(rng) for _ in range(50))

    @given(st.permutations(range(8)))
    def test_inversions_property(self, perm):
        matched = list(enumerate(perm))
        assert inversions(matched) == brute_force_inversions(matched)
