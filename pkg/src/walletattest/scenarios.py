"""End-to-end demonstrations of the attestation flows.

Every scenario runs all roles in-process over the wire encoding, with a
seeded byte source and a fixed clock, so a given seed always prints the
same report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from . import encoding
from .appraisal import AppraisalPolicy, NonceTable, Verifier, default_policy, verify_result
from .compliance import (
    AccountStore,
    Institution,
    TravelRulePartyData,
    VaspAuthority,
    beneficiary_lookup,
    format_report,
    issue_key_certificate,
    reconcile,
)
from .device import USAGE_PCR, DeviceState, GeoPosition, KeyAttributes, provision_device
from .endorsement import EndorsementStore, issue_endorsement
from .evidence import AttestationResult, Verdict, verify_chain
from .ledger import ConfirmedLedger, LedgerTx
from .protocol import LocalTransport, VerifierClient, VerifierService, run_attestation
from .risk import RiskInputs, assess_risk

EPOCH = 1_700_000_000
ENDORSER_ID = "acme-wallets"
VERIFIER_ID = "vasp-verifier"
VASP_NAME = "Example VASP Root CA"

MANIFEST = [
    ("board", encoding.sha256(b"acme board rev C")),
    ("firmware", encoding.sha256(b"wallet firmware 2.4.1")),
    ("secure-element", encoding.sha256(b"se applet 1.9")),
]
LOCATION = GeoPosition(42.36, -71.09, 10.0)


class Clock:
    """Deterministic clock that ticks one second per reading."""

    def __init__(self, start: int = EPOCH):
        self.t = start

    def __call__(self) -> int:
        self.t += 1
        return self.t


@dataclass
class ScenarioReport:
    name: str
    ok: bool = False
    lines: list[str] = field(default_factory=list)

    def say(self, text: str = "") -> None:
        self.lines.append(text)

    def text(self) -> str:
        status = "EXPECTATION MET" if self.ok else "EXPECTATION NOT MET"
        return "\n".join([f"== scenario {self.name} ==", *self.lines, status]) + "\n"


class World:
    """Manufacturer, VASP verifier, VASP compliance desk and ledger, all seeded."""

    def __init__(self, seed: int, verifier_id: str = VERIFIER_ID):
        self.rand = encoding.seeded_rand(seed)
        self.clock = Clock()
        self.endorser_key, endorser_pub = encoding.generate_keypair(self.rand)
        self.verifier_key, self.verifier_pub = encoding.generate_keypair(self.rand)
        vasp_key, _ = encoding.generate_keypair(self.rand)
        self.store = EndorsementStore({ENDORSER_ID: endorser_pub})
        self.policy: AppraisalPolicy = default_policy(verifier_id)
        self.verifier = Verifier(
            self.verifier_key, self.policy, self.store,
            nonces=NonceTable(self.rand, self.clock), clock=self.clock,
        )
        self.client = VerifierClient(LocalTransport(VerifierService(self.verifier)), self.rand)
        self.accounts = AccountStore()
        self.ledger = ConfirmedLedger()
        self.authority = VaspAuthority.create(VASP_NAME, vasp_key, EPOCH, EPOCH + 10 * 365 * 86400)

    def new_device(self) -> DeviceState:
        return provision_device(ENDORSER_ID, LOCATION, MANIFEST, rand=self.rand)

    def endorse(self, device: DeviceState) -> None:
        e = issue_endorsement(self.endorser_key, ENDORSER_ID, device.provisioning_record(),
                              issued_at=self.clock())
        self.client.publish_endorsement(e)

    def attest(self, device: DeviceState) -> AttestationResult:
        return run_attestation(device, self.client, verifier_public_key=self.verifier_pub,
                               now=self.clock())

    def sign_and_submit(self, device: DeviceState, handle: bytes, payload: bytes) -> LedgerTx:
        sig, _ = device.sign_transaction(handle, payload)
        return LedgerTx.create(payload, device.public_key(handle), sig)


CUSTOMER = TravelRulePartyData(
    name="Alice Example",
    account="ALICE-0001",
    address="1 Main St, Cambridge MA",
    institution=Institution("Example VASP", "2 Market St, Boston MA", "12345678"),
)


def _describe_result(report: ScenarioReport, result: AttestationResult) -> None:
    report.say(f"verdict: {result.verdict.value}")
    for f in result.findings:
        mark = "pass" if f.passed else "FAIL"
        report.say(f"  [{mark}] {f.rule_id} ({f.severity.value}): {f.detail}")


def happy_path(seed: int) -> ScenarioReport:
    report = ScenarioReport("happy-path")
    w = World(seed)
    dev = w.new_device()
    report.say(f"provisioned device {dev.device_id.hex()}")
    w.endorse(dev)
    report.say(f"endorsement from {ENDORSER_ID} published to {VERIFIER_ID}")

    key = dev.create_key(KeyAttributes(fixed_to_device=True), parent=dev.ak_handle)
    pub = dev.public_key(key)
    acct = w.accounts.register(CUSTOMER, pub, dev.device_id, now=w.clock())
    report.say(f"registered key {pub.hex()[:16]}... to {acct.account_id}")
    chain = issue_key_certificate(w.authority, acct, pub, (EPOCH, EPOCH + 365 * 86400))
    chain_ok = verify_chain(chain, trusted_roots=[w.authority.root.subject_public_key])
    report.say(f"certificate chain {chain[0].subject_name} <- {chain[1].subject_name}: "
               f"{'verifies' if chain_ok else 'BROKEN'}")

    for i in range(2):
        w.ledger.submit(w.sign_and_submit(dev, key, f"transfer #{i} 0.5 BTC".encode()))
    report.say(f"signed and confirmed 2 transactions, counter={dev.counter.value}")

    result = w.attest(dev)
    _describe_result(report, result)
    verified = verify_result(result, w.verifier_pub)
    report.say(f"result signature verifies under verifier key: {'yes' if verified else 'no'}")

    risk = assess_risk(result, w.verifier_pub,
                       RiskInputs("tpm2", "5000", 0, "dedicated_wallet"))
    report.say(f"insurer risk score: {risk.score} {dict(sorted(risk.factor_scores.items()))}")
    report.ok = result.verdict is Verdict.AFFIRMING and verified and chain_ok
    return report


def pop_insufficiency(seed: int) -> ScenarioReport:
    report = ScenarioReport("pop-insufficiency")
    w = World(seed)
    dev = w.new_device()
    w.endorse(dev)
    # key made on "any PC" and loaded into the wallet afterwards
    soft_priv, _ = encoding.generate_keypair(w.rand)
    handle = dev.import_key(soft_priv)
    pub = dev.public_key(handle)
    w.accounts.register(CUSTOMER, pub, dev.device_id, now=w.clock())

    challenge = w.rand(32)
    response = dev.respond_challenge(handle, challenge)
    pop_ok = encoding.verify_body(challenge, response, pub)
    report.say(f"challenge-response with registered key: {'valid signature' if pop_ok else 'INVALID'}")

    result = w.attest(dev)
    _describe_result(report, result)
    hw = result.finding("key-hardware-bound")
    contraindicated = result.verdict is Verdict.CONTRAINDICATED and hw is not None and not hw.passed
    if pop_ok and contraindicated:
        report.say("PoP ok, attestation contraindicated")
    report.ok = pop_ok and contraindicated
    return report


def tamper(seed: int) -> ScenarioReport:
    report = ScenarioReport("tamper")
    w = World(seed)
    dev = w.new_device()
    w.endorse(dev)
    dev.create_key(KeyAttributes(fixed_to_device=True), parent=dev.ak_handle)
    before = w.attest(dev)
    report.say(f"before modification: {before.verdict.value}")
    dev.update_component("firmware", encoding.sha256(b"wallet firmware 2.4.1-patched"))
    report.say("firmware replaced after endorsement")
    result = w.attest(dev)
    _describe_result(report, result)
    ref = result.finding("config-reference")
    report.ok = (before.verdict is Verdict.AFFIRMING
                 and result.verdict is Verdict.CONTRAINDICATED
                 and ref is not None and not ref.passed)
    return report


def neutrality(seed: int) -> ScenarioReport:
    report = ScenarioReport("neutrality")
    w = World(seed, verifier_id=ENDORSER_ID)
    dev = w.new_device()
    w.endorse(dev)
    dev.create_key(KeyAttributes(fixed_to_device=True), parent=dev.ak_handle)
    report.say(f"verifier id {w.policy.verifier_id!r} equals endorser id {ENDORSER_ID!r}")
    result = w.attest(dev)
    _describe_result(report, result)
    f = result.finding("neutrality")
    report.ok = result.verdict is Verdict.CONTRAINDICATED and f is not None and not f.passed
    return report


def reconcile_mismatch(seed: int) -> ScenarioReport:
    report = ScenarioReport("reconcile-mismatch")
    w = World(seed)
    dev = w.new_device()
    w.endorse(dev)
    key = dev.create_key(KeyAttributes(fixed_to_device=True), parent=dev.ak_handle)
    pub = dev.public_key(key)
    w.accounts.register(CUSTOMER, pub, dev.device_id, now=w.clock())

    txs = [w.sign_and_submit(dev, key, f"payment t{i + 1}".encode()) for i in range(3)]
    for tx in (txs[0], txs[2], txs[1]):
        w.ledger.submit(tx)
    report.say("wallet signed t1, t2, t3; ledger confirmed t1, t3, t2")

    nonce, _ = w.verifier.issue_nonce()
    quote = dev.quote(nonce, [USAGE_PCR])
    endorsement = w.store.lookup(dev.device_id)[0]
    quote_ok = quote.verify(endorsement.ak_public)
    report.say(f"quote over PCR {USAGE_PCR} verifies under endorsed AK: {'yes' if quote_ok else 'no'}")

    rpt = reconcile(dev.usage_log, quote.pcr(USAGE_PCR), w.ledger, pub, device_id=dev.device_id)
    report.say(format_report(rpt))
    party = beneficiary_lookup(w.accounts, pub)
    report.say(f"beneficiary lookup for wallet key: {party.name if party else 'not found'}")
    report.ok = (quote_ok and rpt.chain_ok and len(rpt.matched) == 3
                 and rpt.order_mismatches == [(1, 2)] and not rpt.missing_on_ledger)
    return report


SCENARIOS: dict[str, Callable[[int], ScenarioReport]] = {
    "happy-path": happy_path,
    "pop-insufficiency": pop_insufficiency,
    "tamper": tamper,
    "neutrality": neutrality,
    "reconcile-mismatch": reconcile_mismatch,
}


def run_scenario(name: str, seed: int = 0) -> ScenarioReport:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    return fn(seed)
