"""Command-line front end: ``wallet-attest <group> <command> ...``.

Persisted artifacts all use the canonical encoding. The store directory
(``--store-dir``, else ``$WALLET_ATTEST_HOME``, else ``~/.wallet-attest``)
holds ``anchors.json``, ``endorsements.log``, ``accounts.json`` and
``ledger.log``.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import encoding
from .appraisal import (
    AppraisalContext,
    AppraisalPolicy,
    Verifier,
    appraise,
    default_policy,
    verify_result,
)
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
from .device import USAGE_PCR, DeviceState, GeoPosition, KeyAttributes, Quote, provision_device
from .endorsement import ANCHORS_FILE, EndorsementStore, issue_endorsement, load_anchors, save_anchors
from .errors import AttestationError
from .evidence import AttestationResult, ClaimKind, Endorsement, Evidence, build_evidence
from .ledger import ConfirmedLedger, LedgerTx
from .protocol import TcpTransport, VerifierClient, parse_bind, run_attestation, serve_verifier
from .risk import RiskInputs, assess_risk, load_weights
from .scenarios import SCENARIOS, run_scenario

HOME_ENV = "WALLET_ATTEST_HOME"
DEFAULT_BIND = "127.0.0.1:7411"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def store_dir(args) -> Path:
    d = args.store_dir or os.environ.get(HOME_ENV) or Path.home() / ".wallet-attest"
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def parse_bytes(text: str) -> bytes:
    """Hex if it looks like hex, else unpadded base64url."""
    try:
        if len(text) % 2 == 0:
            return bytes.fromhex(text)
    except ValueError:
        pass
    try:
        return encoding.unb64url(text)
    except AttestationError:
        raise UsageError(f"cannot parse {text!r} as hex or base64url") from None


def write_out(path: str | None, data: bytes) -> None:
    if path is None or path == "-":
        sys.stdout.write(data.decode("utf-8") + "\n")
    else:
        Path(path).write_bytes(data)


def read_value(path: str, cls):
    return encoding.canonical_decode(Path(path).read_bytes(), cls)


def read_key(path: str) -> bytes:
    doc = encoding.loads_json(Path(path).read_bytes())
    return encoding.unb64url(doc["private"])


def rand_for(args):
    seed = getattr(args, "seed", None)
    return encoding.seeded_rand(seed) if seed is not None else None


def load_device(args) -> DeviceState:
    return DeviceState.load(args.device, rand=rand_for(args))


def parse_handle(dev: DeviceState, text: str) -> bytes:
    if text == "ak":
        return dev.ak_handle
    if text == "ek":
        return dev.ek_handle
    return parse_bytes(text)


def endorsement_store(args) -> EndorsementStore:
    d = store_dir(args)
    anchors_path = Path(args.anchors) if getattr(args, "anchors", None) else d / ANCHORS_FILE
    anchors = load_anchors(anchors_path) if anchors_path.exists() else {}
    return EndorsementStore(anchors, d)


def load_policy(args, verifier_id: str | None = None) -> AppraisalPolicy:
    if getattr(args, "policy", None):
        return AppraisalPolicy.load(args.policy)
    return default_policy(verifier_id or "vasp-verifier")


def client_for(addr: str) -> VerifierClient:
    host, port = parse_bind(addr)
    return VerifierClient(TcpTransport(host, port))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    priv, pub = encoding.generate_keypair(rand_for(args))
    Path(args.out).write_bytes(encoding.canonical_encode({"private": priv, "public": pub}))
    os.chmod(args.out, 0o600)
    print(encoding.b64url(pub))
    return 0


def cmd_anchor_add(args) -> int:
    d = store_dir(args)
    path = Path(args.anchors) if args.anchors else d / ANCHORS_FILE
    anchors = load_anchors(path) if path.exists() else {}
    anchors[args.endorser_id] = parse_bytes(args.public_key)
    save_anchors(path, anchors)
    print(f"{len(anchors)} anchor(s) in {path}")
    return 0


def cmd_device_provision(args) -> int:
    comps = []
    for item in args.component:
        name, sep, digest = item.partition("=")
        if not sep:
            raise UsageError(f"--component expects name=hexdigest, got {item!r}")
        comps.append((name, parse_bytes(digest)))
    lat, lon, alt = (float(x) for x in args.geo.split(","))
    dev = provision_device(args.manufacturer, GeoPosition(lat, lon, alt), comps, rand=rand_for(args))
    dev.save(args.out)
    print(dev.device_id.hex())
    return 0


def cmd_device_create_key(args) -> int:
    dev = load_device(args)
    parent = parse_handle(dev, args.parent) if args.parent else None
    h = dev.create_key(KeyAttributes(fixed_to_device=not args.not_fixed), parent)
    dev.save(args.device)
    print(f"{h.hex()} {encoding.b64url(dev.public_key(h))}")
    return 0


def cmd_device_import_key(args) -> int:
    dev = load_device(args)
    h = dev.import_key(read_key(args.key))
    dev.save(args.device)
    print(f"{h.hex()} {encoding.b64url(dev.public_key(h))}")
    return 0


def cmd_device_sign(args) -> int:
    dev = load_device(args)
    handle = parse_handle(dev, args.handle)
    payload = Path(args.payload_file).read_bytes() if args.payload_file else args.payload.encode()
    sig, entry = dev.sign_transaction(handle, payload)
    dev.save(args.device)
    tx = LedgerTx.create(payload, dev.public_key(handle), sig)
    if args.tx_out:
        Path(args.tx_out).write_bytes(encoding.canonical_encode(tx))
    print(f"seq={entry.seq} counter={entry.counter_after} tx={tx.tx_digest.hex()}")
    return 0


def cmd_device_quote(args) -> int:
    dev = load_device(args)
    pcrs = [int(x) for x in args.pcrs.split(",")]
    q = dev.quote(parse_bytes(args.nonce), pcrs)
    write_out(args.out, encoding.canonical_encode(q))
    return 0


def cmd_device_evidence(args) -> int:
    dev = load_device(args)
    claims = [c for c in args.claims.split(",") if c]
    ev = build_evidence(dev, parse_bytes(args.nonce), claims, now=args.now)
    write_out(args.out, encoding.canonical_encode(ev))
    return 0


def cmd_device_attest(args) -> int:
    dev = load_device(args)
    claims = [c for c in args.claims.split(",") if c]
    pub = parse_bytes(args.verifier_public_key) if args.verifier_public_key else None
    result = run_attestation(dev, client_for(args.connect), claims, verifier_public_key=pub)
    if args.out:
        Path(args.out).write_bytes(encoding.canonical_encode(result))
    _print_result(result)
    return 0 if result.verdict.value != "contraindicated" else 1


def cmd_endorse_issue(args) -> int:
    dev = load_device(args)
    e = issue_endorsement(read_key(args.key), args.endorser_id, dev.provisioning_record(),
                          issued_at=args.issued_at)
    write_out(args.out, encoding.canonical_encode(e))
    return 0


def cmd_endorse_publish(args) -> int:
    e = read_value(args.file, Endorsement)
    if args.connect:
        client_for(args.connect).publish_endorsement(e)
        print(f"published to {args.connect}")
    else:
        endorsement_store(args).store(e)
        print(f"stored in {store_dir(args)}")
    return 0


def cmd_verify_serve(args) -> int:
    store = endorsement_store(args)
    key = read_key(args.key)
    policy = load_policy(args)
    verifier = Verifier(key, policy, store)
    server = serve_verifier(args.bind, verifier, store)
    host, port = server.address
    print(f"verifier {policy.verifier_id} listening on {host}:{port}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_verify_appraise(args) -> int:
    store = endorsement_store(args)
    evidence = read_value(args.evidence, Evidence)
    policy = load_policy(args)
    ctx = AppraisalContext(
        nonce=parse_bytes(args.nonce) if args.nonce else evidence.quote.nonce,
        nonce_issued_at=args.nonce_issued_at,
        endorsements=store.lookup(evidence.quote.device_id),
        now=args.now if args.now is not None else int(time.time()),
    )
    result = appraise(evidence, ctx, policy, read_key(args.key))
    if args.out:
        Path(args.out).write_bytes(encoding.canonical_encode(result))
    _print_result(result)
    return 0


def cmd_verify_result(args) -> int:
    result = read_value(args.file, AttestationResult)
    ok = verify_result(result, parse_bytes(args.verifier_public_key))
    print("valid" if ok else "INVALID")
    return 0 if ok else 1


def cmd_risk_assess(args) -> int:
    result = read_value(args.result, AttestationResult)
    weights = load_weights(args.weights) if args.weights else None
    inputs = RiskInputs(args.hardware_type, args.asset_value, args.weakness_history, args.host_class)
    ra = assess_risk(result, parse_bytes(args.verifier_public_key), inputs, weights)
    print(f"score {ra.score}")
    for name, score in sorted(ra.factor_scores.items()):
        print(f"  {name:24} {score:>3}")
    return 0


def cmd_vasp_register(args) -> int:
    accounts = AccountStore.in_directory(store_dir(args))
    customer = TravelRulePartyData(
        name=args.name, account=args.account, address=args.address,
        institution=Institution(args.institution_name, args.institution_address, args.institution_id),
    )
    acct = accounts.register(customer, parse_bytes(args.public_key), parse_bytes(args.device_id),
                             account_id=args.account_id)
    print(acct.account_id)
    return 0


def cmd_vasp_certify(args) -> int:
    accounts = AccountStore.in_directory(store_dir(args))
    key = parse_bytes(args.public_key)
    acct = accounts.account_for_key(key)
    if acct is None:
        print("error: key is not registered", file=sys.stderr)
        return 1
    root_nb = args.root_not_before if args.root_not_before is not None else args.not_before
    root_na = args.root_not_after if args.root_not_after is not None else root_nb + 10 * 365 * 86400
    authority = VaspAuthority.create(args.vasp_name, read_key(args.key), root_nb, root_na)
    chain = issue_key_certificate(authority, acct, key, (args.not_before, args.not_after))
    write_out(args.out, encoding.canonical_encode(chain))
    return 0


def cmd_vasp_lookup(args) -> int:
    party = beneficiary_lookup(AccountStore.in_directory(store_dir(args)), parse_bytes(args.public_key))
    if party is None:
        print("not_found")
        return 1
    print(encoding.canonical_encode(party).decode())
    return 0


def cmd_vasp_reconcile(args) -> int:
    dev = load_device(args)
    d = store_dir(args)
    pub = parse_bytes(args.public_key)
    if args.quote:
        quote = read_value(args.quote, Quote)
        endorsements = endorsement_store(args).lookup(dev.device_id)
        if endorsements and not quote.verify(endorsements[0].ak_public):
            print("error: quote does not verify under the endorsed AK", file=sys.stderr)
            return 1
        pcr16 = quote.pcr(USAGE_PCR)
        if pcr16 is None:
            print(f"error: quote does not cover PCR {USAGE_PCR}", file=sys.stderr)
            return 1
    else:
        pcr16 = dev.pcr_bank.read(USAGE_PCR)
    report = reconcile(dev.usage_log, pcr16, ConfirmedLedger.in_directory(d), pub, device_id=dev.device_id)
    if args.out:
        Path(args.out).write_bytes(encoding.canonical_encode(report))
    print(format_report(report))
    return 0 if report.clean else 1


def cmd_ledger_submit(args) -> int:
    tx = read_value(args.tx, LedgerTx)
    pos = ConfirmedLedger.in_directory(store_dir(args)).submit(tx)
    print(pos)
    return 0


def cmd_ledger_query(args) -> int:
    for pos, digest in ConfirmedLedger.in_directory(store_dir(args)).query_by_key(parse_bytes(args.public_key)):
        print(pos, digest.hex())
    return 0


def cmd_scenario_run(args) -> int:
    report = run_scenario(args.name, args.seed if args.seed is not None else 0)
    sys.stdout.write(report.text())
    return 0 if report.ok else 1


def cmd_scenario_list(args) -> int:
    for name in SCENARIOS:
        print(name)
    return 0


def _print_result(result: AttestationResult) -> None:
    print(f"verdict: {result.verdict.value}")
    for f in result.findings:
        print(f"  [{'pass' if f.passed else 'FAIL'}] {f.rule_id} ({f.severity.value}): {f.detail}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store-dir", help=f"state directory (default ${HOME_ENV} or ~/.wallet-attest)")
    common.add_argument("--seed", type=int, help="seed the byte source (reproducible demos only)")

    p = _Parser(prog="wallet-attest", description="Wallet attestation toolkit")
    groups = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    def cmd(sub, name, fn, help_=None):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = cmd(groups, "keygen", cmd_keygen, "generate an Ed25519 key file")
    sp.add_argument("--out", required=True)

    g = groups.add_parser("anchor", help="verifier trust anchors").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "add", cmd_anchor_add)
    sp.add_argument("--endorser-id", required=True)
    sp.add_argument("--public-key", required=True)
    sp.add_argument("--anchors")

    g = groups.add_parser("device", help="emulated wallet hardware").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "provision", cmd_device_provision)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manufacturer", required=True)
    sp.add_argument("--geo", required=True, help="lat,lon,alt")
    sp.add_argument("--component", action="append", default=[], help="name=hexdigest (repeatable)")
    sp = cmd(g, "create-key", cmd_device_create_key)
    sp.add_argument("--device", required=True)
    sp.add_argument("--parent", help="'ak', 'ek' or a handle")
    sp.add_argument("--not-fixed", action="store_true", help="allow export (not hardware-bound)")
    sp = cmd(g, "import-key", cmd_device_import_key)
    sp.add_argument("--device", required=True)
    sp.add_argument("--key", required=True, help="key file from keygen")
    sp = cmd(g, "sign", cmd_device_sign)
    sp.add_argument("--device", required=True)
    sp.add_argument("--handle", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--payload")
    src.add_argument("--payload-file")
    sp.add_argument("--tx-out", help="write the ledger transaction here")
    sp = cmd(g, "quote", cmd_device_quote)
    sp.add_argument("--device", required=True)
    sp.add_argument("--nonce", required=True)
    sp.add_argument("--pcrs", default=f"0,{USAGE_PCR}")
    sp.add_argument("--out")
    sp = cmd(g, "evidence", cmd_device_evidence)
    sp.add_argument("--device", required=True)
    sp.add_argument("--nonce", required=True)
    sp.add_argument("--claims", default=",".join(k.value for k in ClaimKind))
    sp.add_argument("--now", type=int)
    sp.add_argument("--out")
    sp = cmd(g, "attest", cmd_device_attest, "run the full attestation flow against a verifier")
    sp.add_argument("--device", required=True)
    sp.add_argument("--connect", default=DEFAULT_BIND)
    sp.add_argument("--claims", default=",".join(k.value for k in ClaimKind))
    sp.add_argument("--verifier-public-key")
    sp.add_argument("--out")

    g = groups.add_parser("endorse", help="manufacturer endorsements").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "issue", cmd_endorse_issue)
    sp.add_argument("--device", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--endorser-id", required=True)
    sp.add_argument("--issued-at", type=int)
    sp.add_argument("--out")
    sp = cmd(g, "publish", cmd_endorse_publish)
    sp.add_argument("--file", required=True)
    sp.add_argument("--connect", help="push to a running verifier instead of the local store")
    sp.add_argument("--anchors")

    g = groups.add_parser("verify", help="the neutral verifier").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "serve", cmd_verify_serve)
    sp.add_argument("--bind", default=DEFAULT_BIND)
    sp.add_argument("--policy")
    sp.add_argument("--anchors")
    sp.add_argument("--key", required=True, help="verifier signing key file")
    sp = cmd(g, "appraise", cmd_verify_appraise)
    sp.add_argument("--evidence", required=True)
    sp.add_argument("--nonce", help="expected nonce (default: the one in the quote)")
    sp.add_argument("--nonce-issued-at", type=int, required=True)
    sp.add_argument("--now", type=int)
    sp.add_argument("--policy")
    sp.add_argument("--anchors")
    sp.add_argument("--key", required=True)
    sp.add_argument("--out")
    sp = cmd(g, "result", cmd_verify_result, "check a result's signature and consistency")
    sp.add_argument("--file", required=True)
    sp.add_argument("--verifier-public-key", required=True)

    g = groups.add_parser("risk", help="relying-party risk scoring").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "assess", cmd_risk_assess)
    sp.add_argument("--result", required=True)
    sp.add_argument("--verifier-public-key", required=True)
    sp.add_argument("--hardware-type", required=True)
    sp.add_argument("--asset-value", required=True)
    sp.add_argument("--weakness-history", type=int, default=0)
    sp.add_argument("--host-class", default="unknown")
    sp.add_argument("--weights")

    g = groups.add_parser("vasp", help="VASP compliance services").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "register", cmd_vasp_register)
    for flag in ("--name", "--account", "--address", "--institution-name",
                 "--institution-address", "--institution-id", "--public-key", "--device-id"):
        sp.add_argument(flag, required=True)
    sp.add_argument("--account-id")
    sp = cmd(g, "certify", cmd_vasp_certify)
    sp.add_argument("--key", required=True, help="VASP root signing key file")
    sp.add_argument("--vasp-name", required=True)
    sp.add_argument("--public-key", required=True)
    sp.add_argument("--not-before", type=int, required=True)
    sp.add_argument("--not-after", type=int, required=True)
    sp.add_argument("--root-not-before", type=int)
    sp.add_argument("--root-not-after", type=int)
    sp.add_argument("--out")
    sp = cmd(g, "lookup", cmd_vasp_lookup)
    sp.add_argument("--public-key", required=True)
    sp = cmd(g, "reconcile", cmd_vasp_reconcile)
    sp.add_argument("--device", required=True)
    sp.add_argument("--public-key", required=True)
    sp.add_argument("--quote", help="quote covering PCR 16 (recommended)")
    sp.add_argument("--anchors")
    sp.add_argument("--out", help="write the canonical .rpt report here")

    g = groups.add_parser("ledger", help="simulated ledger").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "submit", cmd_ledger_submit)
    sp.add_argument("--tx", required=True)
    sp = cmd(g, "query", cmd_ledger_query)
    sp.add_argument("--public-key", required=True)

    g = groups.add_parser("scenario", help="built-in demonstrations").add_subparsers(dest="cmd", required=True)
    sp = cmd(g, "run", cmd_scenario_run)
    sp.add_argument("name", choices=list(SCENARIOS))
    cmd(g, "list", cmd_scenario_list)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"wallet-attest: error: {exc}", file=sys.stderr)
        return 2
    except (AttestationError, OSError, ValueError) as exc:
        print(f"wallet-attest: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
