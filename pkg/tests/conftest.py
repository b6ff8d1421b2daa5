from __future__ import annotations

import hashlib

import pytest

from walletattest import encoding
from walletattest.appraisal import AppraisalContext, default_policy
from walletattest.device import GeoPosition, KeyAttributes, provision_device
from walletattest.endorsement import EndorsementStore, issue_endorsement
from walletattest.evidence import ClaimKind, build_evidence

ENDORSER_ID = "acme-wallets"
VERIFIER_ID = "vasp-verifier"
T0 = 1_700_000_000
LOCATION = GeoPosition(42.36, -71.09, 10.0)


def ref_sha256(*parts: bytes) -> bytes:
    """Reference hash used as the independent oracle (hashlib directly)."""
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def manifest():
    return [("board", ref_sha256(b"d1")), ("fw", ref_sha256(b"d2"))]


@pytest.fixture
def rand():
    return encoding.seeded_rand(1234)


@pytest.fixture
def device(rand):
    return provision_device(ENDORSER_ID, LOCATION, manifest(), rand=rand)


@pytest.fixture
def endorser(rand):
    return encoding.generate_keypair(rand)


@pytest.fixture
def verifier_keys(rand):
    return encoding.generate_keypair(rand)


class Env:
    """A provisioned, endorsed device with one hardware-bound key."""

    def __init__(self, seed: int = 7, verifier_id: str = VERIFIER_ID):
        self.rand = encoding.seeded_rand(seed)
        self.endorser_key, self.endorser_pub = encoding.generate_keypair(self.rand)
        self.verifier_key, self.verifier_pub = encoding.generate_keypair(self.rand)
        self.device = provision_device(ENDORSER_ID, LOCATION, manifest(), rand=self.rand)
        self.key = self.device.create_key(KeyAttributes(fixed_to_device=True), self.device.ak_handle)
        self.endorsement = issue_endorsement(
            self.endorser_key, ENDORSER_ID, self.device.provisioning_record(), issued_at=T0
        )
        self.store = EndorsementStore({ENDORSER_ID: self.endorser_pub})
        self.store.store(self.endorsement)
        self.policy = default_policy(verifier_id)

    def evidence(self, nonce: bytes | None = None, claims=tuple(ClaimKind), **kw):
        nonce = nonce if nonce is not None else self.rand(32)
        return build_evidence(self.device, nonce, list(claims), now=T0 + 10, **kw)

    def context(self, evidence, now: int = T0 + 10, issued_at: int = T0):
        return AppraisalContext(evidence.quote.nonce, issued_at, [self.endorsement], now)


@pytest.fixture
def env():
    return Env()


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
