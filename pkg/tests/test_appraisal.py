from __future__ import annotations

import dataclasses
import itertools
import threading

import pytest

from walletattest import encoding
from walletattest.appraisal import (
    AppraisalContext,
    AppraisalPolicy,
    NonceTable,
    Rule,
    Verifier,
    appraise,
    appraise_encoded,
    default_policy,
    evaluate,
    evaluate_rule,
    issue_nonce,
    verify_result,
)
from walletattest.device import KeyAttributes
from walletattest.endorsement import EndorsementStore
from walletattest.errors import (
    InvalidPolicy,
    MalformedEvidence,
    NoEndorsement,
    StaleNonce,
    UnknownRuleKind,
)
from walletattest.evidence import ClaimKind, Finding, Severity, Verdict

from .conftest import ENDORSER_ID, T0, VERIFIER_ID, Env

M, A = Severity.MANDATORY, Severity.ADVISORY


def rule(rule_id, kind, severity=M, **params):
    return Rule(rule_id, severity, kind, params)


def policy_with(*rules, verifier_id=VERIFIER_ID, window=300):
    return AppraisalPolicy(verifier_id, list(rules), window)


# ---------------------------------------------------------------------------
# exhaustive soundness enumeration (shared with the acceptance suite)
# ---------------------------------------------------------------------------

INSIDE = dict(lat_min=40, lat_max=45, lon_min=-75, lon_max=-70)
OUTSIDE = dict(lat_min=0, lat_max=1, lon_min=0, lon_max=1)


def _oracle_verdict(expected: list[tuple[Severity, bool]]) -> Verdict:
    if any(sev is M and not ok for sev, ok in expected):
        return Verdict.CONTRAINDICATED
    if any(not ok for _, ok in expected):
        return Verdict.WARNING
    return Verdict.AFFIRMING


def soundness_cases():
    """Yield (label, result, expected_passes, expected_verdict, verifier_pub) for every case.

    Axes: signature ok/bad, fresh/stale, neutral/self-endorsed, three rules
    each forced to pass or fail, and every mandatory/advisory assignment of
    those three rules.
    """
    env = Env(seed=11)
    env.device.sign_transaction(env.key, b"t1")
    good = env.evidence()
    sig = bytearray(good.signature)
    sig[0] ^= 1
    bad = dataclasses.replace(good, signature=bytes(sig))
    hw_pub = encoding.b64url(env.device.public_key(env.key))
    other_pub = encoding.b64url(bytes(32))
    window = 300
    for sig_ok, fresh, neutral, outcomes, sevs in itertools.product(
        (True, False), (True, False), (True, False),
        itertools.product((True, False), repeat=3),
        itertools.product((M, A), repeat=3),
    ):
        c_ok, g_ok, k_ok = outcomes
        rules = [
            rule("counter", "counter_min", sevs[0], minimum=0 if c_ok else 10**6),
            rule("fence", "geofence", sevs[1], **(INSIDE if g_ok else OUTSIDE)),
            rule("hw", "key_hardware_bound", sevs[2], public_key=hw_pub if k_ok else other_pub),
        ]
        pol = policy_with(*rules, verifier_id=VERIFIER_ID if neutral else ENDORSER_ID, window=window)
        ev = good if sig_ok else bad
        now = T0 + 10 if fresh else T0 + window + 1
        result = appraise(ev, env.context(ev, now=now), pol, env.verifier_key)
        expected = [(M, sig_ok), (M, fresh), (M, neutral)] + list(zip(sevs, outcomes))
        label = (f"sig={'ok' if sig_ok else 'bad'} fresh={fresh} neutral={neutral} "
                 f"rules={outcomes} sev={[s.value[0] for s in sevs]}")
        yield label, result, expected, _oracle_verdict(expected), env.verifier_pub


def soundness_violations() -> tuple[int, list[str]]:
    count, bad = 0, []
    for label, result, expected, verdict, pub in soundness_cases():
        count += 1
        passes = [(f.severity, f.passed) for f in result.findings]
        problems = []
        if passes != expected:
            problems.append(f"findings {passes} != {expected}")
        if result.verdict is not verdict:
            problems.append(f"verdict {result.verdict.value} != {verdict.value}")
        if not verify_result(result, pub):
            problems.append("result does not verify")
        neutral_f = result.finding("neutrality")
        if result.verifier_id == ENDORSER_ID and (
            result.verdict is not Verdict.CONTRAINDICATED or neutral_f is None or neutral_f.passed
        ):
            problems.append("self-endorsed appraisal not contraindicated")
        if problems:
            bad.append(f"{label}: {'; '.join(problems)}")
    return count, bad


def test_exhaustive_soundness():
    count, bad = soundness_violations()
    assert count == 2 * 2 * 2 * 8 * 8
    assert bad == []


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------


def test_happy_affirming(env):
    ev = env.evidence()
    result = appraise(ev, env.context(ev), env.policy, env.verifier_key)
    assert result.verdict is Verdict.AFFIRMING, result.findings
    assert [f.rule_id for f in result.findings][:3] == ["signature", "freshness", "neutrality"]
    assert verify_result(result, env.verifier_pub)


def test_config_mismatch_contraindicated(env):
    env.device.update_component("fw", bytes(32))
    ev = env.evidence()
    result = appraise(ev, env.context(ev), env.policy, env.verifier_key)
    assert result.verdict is Verdict.CONTRAINDICATED
    assert not result.finding("config-reference").passed
    assert "fw" in result.finding("config-reference").detail


def test_self_endorsement_contraindicated(env):
    ev = env.evidence()
    result = appraise(ev, env.context(ev), default_policy(ENDORSER_ID), env.verifier_key)
    assert result.verdict is Verdict.CONTRAINDICATED
    assert not result.finding("neutrality").passed


def test_stale_evidence(env):
    ev = env.evidence()
    result = appraise(ev, env.context(ev, now=T0 + 301), env.policy, env.verifier_key)
    assert result.verdict is Verdict.CONTRAINDICATED
    assert not result.finding("freshness").passed
    # exactly at the window boundary is still fresh
    edge = appraise(ev, env.context(ev, now=T0 + 300), env.policy, env.verifier_key)
    assert edge.finding("freshness").passed


def test_wrong_nonce_not_fresh(env):
    ev = env.evidence()
    ctx = AppraisalContext(bytes(32), T0, [env.endorsement], T0 + 1)
    assert not evaluate(ev, ctx, env.policy).finding("freshness").passed


def test_no_endorsement(env):
    ev = env.evidence()
    with pytest.raises(NoEndorsement):
        evaluate(ev, AppraisalContext(ev.quote.nonce, T0, [], T0), env.policy)


def test_malformed_evidence(env):
    ctx = env.context(env.evidence())
    with pytest.raises(MalformedEvidence):
        evaluate("not evidence", ctx, env.policy)
    with pytest.raises(MalformedEvidence):
        appraise_encoded(b'{"quote":1}', ctx, env.policy, env.verifier_key)


def test_deterministic_body(env):
    ev = env.evidence()
    ctx = env.context(ev)
    assert evaluate(ev, ctx, env.policy).body() == evaluate(ev, ctx, env.policy).body()


class TestRules:
    def test_geofence_inside(self, env):
        ev = env.evidence()
        f = evaluate_rule(rule("g", "geofence", **INSIDE), ev, [env.endorsement])
        assert f.passed

    def test_geofence_inclusive_edges(self, env):
        ev = env.evidence()
        edge = dict(lat_min=42.36, lat_max=42.36, lon_min=-71.09, lon_max=-71.09)
        assert evaluate_rule(rule("g", "geofence", **edge), ev, [env.endorsement]).passed

    def test_geofence_needs_claim(self, env):
        ev = env.evidence(claims=[])
        assert not evaluate_rule(rule("g", "geofence", **INSIDE), ev, [env.endorsement]).passed

    def test_software_key_not_hardware_bound(self, env):
        soft = env.device.import_key(encoding.generate_keypair(env.rand)[0])
        ev = env.evidence(subjects=[soft])
        f = evaluate_rule(rule("k", "key_hardware_bound"), ev, [env.endorsement])
        assert not f.passed
        assert "created_inside=False" in f.detail

    def test_hardware_key_bound(self, env):
        ev = env.evidence(subjects=[env.key])
        assert evaluate_rule(rule("k", "key_hardware_bound"), ev, [env.endorsement]).passed

    def test_fixed_but_not_under_ak_still_bound(self, env):
        h = env.device.create_key(KeyAttributes(fixed_to_device=True))
        ev = env.evidence(subjects=[h])
        assert evaluate_rule(rule("k", "key_hardware_bound"), ev, [env.endorsement]).passed

    def test_counter_min(self, env):
        for _ in range(3):
            env.device.sign_transaction(env.key, env.rand(8))
        ev = env.evidence()
        assert ev.quote.counter == 3
        assert not evaluate_rule(rule("c", "counter_min", minimum=5), ev, [env.endorsement]).passed
        assert evaluate_rule(rule("c", "counter_min", minimum=3), ev, [env.endorsement]).passed

    def test_reference_subset(self, env):
        env.device.update_component("fw", bytes(32))
        ev = env.evidence()
        ok = evaluate_rule(rule("r", "reference_match", components=["board"]), ev, [env.endorsement])
        bad = evaluate_rule(rule("r", "reference_match", components=["fw"]), ev, [env.endorsement])
        assert ok.passed and not bad.passed

    def test_config_known(self, env):
        ev = env.evidence()
        assert evaluate_rule(rule("k", "config_known"), ev, [env.endorsement]).passed
        env.device.update_component("extra", bytes(32))
        f = evaluate_rule(rule("k", "config_known"), env.evidence(), [env.endorsement])
        assert not f.passed and "unknown: extra" in f.detail

    def test_neutrality_rule(self, env):
        ev = env.evidence()
        assert not evaluate_rule(rule("n", "neutrality"), ev, [env.endorsement], ENDORSER_ID).passed
        assert evaluate_rule(rule("n", "neutrality"), ev, [env.endorsement], VERIFIER_ID).passed

    def test_unknown_kind(self, env):
        with pytest.raises(UnknownRuleKind):
            evaluate_rule(Rule("x", M, "astrology"), env.evidence(), [env.endorsement])

    def test_rules_read_only_machine_readable_fields(self, env):
        # free-text details in endorsements or claims cannot flip an outcome:
        # rules compare digests, attributes, numbers and identifiers only
        ev = env.evidence()
        renamed = dataclasses.replace(env.endorsement, endorser_id="acme wallets (trusted!)")
        base = evaluate_rule(rule("r", "reference_match"), ev, [env.endorsement])
        other = evaluate_rule(rule("r", "reference_match"), ev, [renamed])
        assert base.passed == other.passed


class TestPolicy:
    def test_duplicate_ids(self):
        with pytest.raises(InvalidPolicy):
            policy_with(rule("a", "config_known"), rule("a", "config_known"))

    def test_window_positive(self):
        with pytest.raises(InvalidPolicy):
            policy_with(window=0)

    def test_unknown_kind(self):
        with pytest.raises(UnknownRuleKind):
            policy_with(Rule("a", M, "nope"))

    def test_reserved_ids(self):
        with pytest.raises(InvalidPolicy):
            policy_with(rule("freshness", "config_known"))

    def test_bad_params(self):
        with pytest.raises(InvalidPolicy):
            policy_with(rule("g", "geofence", lat_min=5, lat_max=1, lon_min=0, lon_max=1))
        with pytest.raises(InvalidPolicy):
            policy_with(rule("c", "counter_min", minimum=-1))

    def test_file_round_trip(self, tmp_path):
        p = policy_with(rule("g", "geofence", A, **INSIDE), rule("c", "counter_min", minimum=2))
        path = tmp_path / "policy.json"
        path.write_bytes(encoding.canonical_encode(p))
        assert AppraisalPolicy.load(path) == p


class TestResult:
    def test_inconsistent_result_rejected(self, env):
        ev = env.evidence()
        res = appraise(ev, env.context(ev), env.policy, env.verifier_key)
        failed = Finding("x", "config_known", M, False, "")
        forged = dataclasses.replace(res, findings=res.findings + [failed]).signed_with(env.verifier_key)
        assert forged.verdict is Verdict.AFFIRMING
        assert not verify_result(forged, env.verifier_pub)

    def test_flipped_signature(self, env):
        ev = env.evidence()
        res = appraise(ev, env.context(ev), env.policy, env.verifier_key)
        sig = bytearray(res.signature)
        sig[-1] ^= 0x80
        assert not verify_result(dataclasses.replace(res, signature=bytes(sig)), env.verifier_pub)
        assert not verify_result(res, encoding.generate_keypair(env.rand)[1])
        assert not verify_result(res, b"bad key")


class TestNonces:
    def test_distinct(self):
        table = NonceTable()
        nonces = {issue_nonce(table)[0] for _ in range(1000)}
        assert len(nonces) == 1000
        assert all(len(n) == 32 for n in nonces)

    def test_single_use(self, env):
        table = NonceTable(clock=lambda: T0)
        nonce, _ = table.issue()
        ev = env.evidence(nonce)
        appraise(ev, env.context(ev), env.policy, env.verifier_key, nonces=table)
        with pytest.raises(StaleNonce):
            appraise(ev, env.context(ev), env.policy, env.verifier_key, nonces=table)

    def test_unknown_nonce(self):
        with pytest.raises(StaleNonce):
            NonceTable().consume(bytes(32))

    def test_concurrent_consume(self):
        table = NonceTable()
        nonce, _ = table.issue()
        wins, losses = [], []

        def go():
            try:
                table.consume(nonce)
                wins.append(1)
            except StaleNonce:
                losses.append(1)

        threads = [threading.Thread(target=go) for _ in range(16)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert (len(wins), len(losses)) == (1, 15)


class TestVerifier:
    def _verifier(self, env, clock):
        store = EndorsementStore({ENDORSER_ID: env.endorser_pub})
        store.store(env.endorsement)
        return Verifier(env.verifier_key, env.policy, store, NonceTable(clock=clock), clock=clock)

    def test_flow(self, env):
        v = self._verifier(env, lambda: T0 + 5)
        nonce, _ = v.issue_nonce()
        res = v.appraise(env.evidence(nonce))
        assert res.verdict is Verdict.AFFIRMING
        with pytest.raises(StaleNonce):
            v.appraise(env.evidence(nonce))

    def test_missing_endorsement_keeps_nonce(self, env):
        v = self._verifier(env, lambda: T0)
        nonce, _ = v.issue_nonce()
        stranger = Env(seed=99)
        with pytest.raises(NoEndorsement):
            v.appraise(stranger.evidence(nonce))
        assert v.appraise(env.evidence(nonce)).verdict is Verdict.AFFIRMING

    def test_unissued_nonce(self, env):
        v = self._verifier(env, lambda: T0)
        with pytest.raises(StaleNonce):
            v.appraise(env.evidence())

    def test_missing_provenance_contraindicated(self, env):
        v = self._verifier(env, lambda: T0 + 1)
        nonce, _ = v.issue_nonce()
        assert v.appraise(env.evidence(nonce, claims=[ClaimKind.GEOLOCATION])).verdict is Verdict.CONTRAINDICATED
