"""Newline-delimited canonical JSON protocol between attester, verifier and relying party.

Every message is an :class:`Envelope` on its own line. Requests:

``attest_request``       -> ``nonce_issue``        (Step 1: ask for fresh evidence)
``evidence_submit``      -> ``attestation_result`` (Steps 2 and 3)
``endorsement_publish``  -> ``endorsement_ack``    (Steps a and b, manufacturer push)
``result_fetch``         -> ``attestation_result`` (relying party picks up a result)

Failures come back as ``error`` envelopes carrying a machine-readable code.
"""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Any, Iterable, Protocol

from . import encoding
from .appraisal import Verifier, verify_result
from .device import DeviceState
from .encoding import RandBytes
from .endorsement import EndorsementStore
from .errors import (
    AttestationError,
    DecodeError,
    MalformedEvidence,
    ProtocolError,
    TransportFailure,
    UnverifiedEndorsement,
    UnverifiedResult,
    error_for_code,
)
from .evidence import AttestationResult, ClaimKind, Endorsement, Evidence, build_evidence

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
CORRELATION_ID_SIZE = 16
MAX_LINE = 4 * 1024 * 1024

ATTEST_REQUEST = "attest_request"
EVIDENCE_SUBMIT = "evidence_submit"
ENDORSEMENT_PUBLISH = "endorsement_publish"
RESULT_FETCH = "result_fetch"
NONCE_ISSUE = "nonce_issue"
ATTESTATION_RESULT = "attestation_result"
ENDORSEMENT_ACK = "endorsement_ack"
ERROR = "error"

REQUEST_TYPES = frozenset({ATTEST_REQUEST, EVIDENCE_SUBMIT, ENDORSEMENT_PUBLISH, RESULT_FETCH})
RESPONSE_TYPES = frozenset({NONCE_ISSUE, ATTESTATION_RESULT, ENDORSEMENT_ACK, ERROR})


@dataclass(frozen=True)
class Envelope:
    v: int
    type: str
    body: dict[str, Any]
    correlation_id: bytes

    def to_line(self) -> bytes:
        return encoding.canonical_encode(self) + b"\n"

    @classmethod
    def from_line(cls, line: bytes) -> Envelope:
        env = encoding.canonical_decode(line.rstrip(b"\r\n"), cls)
        if env.v != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {env.v}")
        if len(env.correlation_id) != CORRELATION_ID_SIZE:
            raise ProtocolError("correlation_id must be 16 bytes")
        return env

    def reply(self, type_: str, body: dict[str, Any]) -> Envelope:
        return Envelope(PROTOCOL_VERSION, type_, body, self.correlation_id)


def error_envelope(correlation_id: bytes, code: str, message: str) -> Envelope:
    return Envelope(PROTOCOL_VERSION, ERROR, {"code": code, "message": message}, correlation_id)


# ---------------------------------------------------------------------------
# verifier side
# ---------------------------------------------------------------------------


class VerifierService:
    """Message dispatcher; transport-agnostic and safe to share across connections."""

    def __init__(self, verifier: Verifier, store: EndorsementStore | None = None):
        self.verifier = verifier
        self.store = store if store is not None else verifier.store
        self._results: dict[bytes, AttestationResult] = {}
        self._results_lock = threading.Lock()

    def handle(self, env: Envelope) -> Envelope:
        try:
            if env.type == ATTEST_REQUEST:
                return self._attest_request(env)
            if env.type == EVIDENCE_SUBMIT:
                return self._evidence_submit(env)
            if env.type == ENDORSEMENT_PUBLISH:
                return self._endorsement_publish(env)
            if env.type == RESULT_FETCH:
                return self._result_fetch(env)
            raise ProtocolError(f"unknown message type {env.type!r}")
        except AttestationError as exc:
            return error_envelope(env.correlation_id, exc.code, str(exc))

    def handle_line(self, line: bytes) -> bytes:
        try:
            env = Envelope.from_line(line)
        except (DecodeError, ProtocolError) as exc:
            cid = _salvage_correlation_id(line)
            return error_envelope(cid, ProtocolError.code, str(exc)).to_line()
        return self.handle(env).to_line()

    def _attest_request(self, env: Envelope) -> Envelope:
        nonce, issued_at = self.verifier.issue_nonce()
        return env.reply(NONCE_ISSUE, {
            "nonce": encoding.b64url(nonce),
            "issued_at": issued_at,
            "verifier_id": self.verifier.verifier_id,
            "verifier_key": encoding.b64url(self.verifier.public_key),
        })

    def _evidence_submit(self, env: Envelope) -> Envelope:
        try:
            evidence = encoding.from_jsonable(env.body.get("evidence"), Evidence)
        except (DecodeError, ValueError, TypeError) as exc:
            raise MalformedEvidence(str(exc)) from exc
        result = self.verifier.appraise(evidence)
        with self._results_lock:
            self._results[env.correlation_id] = result
        return env.reply(ATTESTATION_RESULT, {"result": encoding.to_jsonable(result)})

    def _endorsement_publish(self, env: Envelope) -> Envelope:
        try:
            e = encoding.from_jsonable(env.body.get("endorsement"), Endorsement)
        except (DecodeError, ValueError, TypeError) as exc:
            raise UnverifiedEndorsement(f"undecodable endorsement: {exc}") from exc
        self.store.store(e)
        return env.reply(ENDORSEMENT_ACK, {"device_id": encoding.b64url(e.device_id)})

    def _result_fetch(self, env: Envelope) -> Envelope:
        raw = env.body.get("correlation_id")
        try:
            wanted = encoding.unb64url(raw)
        except DecodeError as exc:
            raise ProtocolError(f"bad correlation_id: {exc}") from exc
        with self._results_lock:
            result = self._results.get(wanted)
        if result is None:
            raise ProtocolError("no result for that correlation_id")
        return env.reply(ATTESTATION_RESULT, {"result": encoding.to_jsonable(result)})


def _salvage_correlation_id(line: bytes) -> bytes:
    try:
        obj = encoding.loads_json(line)
        cid = encoding.unb64url(obj["correlation_id"])
        if len(cid) == CORRELATION_ID_SIZE:
            return cid
    except Exception:
        pass
    return bytes(CORRELATION_ID_SIZE)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: VerifierService = self.server.service
        while True:
            line = self.rfile.readline(MAX_LINE + 1)
            if not line:
                return
            if not line.strip():
                continue
            if len(line) > MAX_LINE:
                self.wfile.write(error_envelope(bytes(CORRELATION_ID_SIZE), ProtocolError.code,
                                                "message too long").to_line())
                return
            self.wfile.write(service.handle_line(line))
            self.wfile.flush()


class VerifierServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: VerifierService):
        super().__init__(address, _Handler)
        self.service = service
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> VerifierServer:
        self._thread = threading.Thread(target=self.serve_forever, name="verifier", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()


def parse_bind(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"expected host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def serve_verifier(bind_address: str | tuple[str, int], verifier: Verifier,
                   store: EndorsementStore | None = None) -> VerifierServer:
    """Start the verifier on a background thread and return the running server."""
    if isinstance(bind_address, str):
        bind_address = parse_bind(bind_address)
    return VerifierServer(bind_address, VerifierService(verifier, store)).start()


# ---------------------------------------------------------------------------
# client side
# ---------------------------------------------------------------------------


class Transport(Protocol):
    def exchange(self, line: bytes) -> bytes: ...


class LocalTransport:
    """In-process transport that still goes through the wire encoding."""

    def __init__(self, service: VerifierService):
        self.service = service

    def exchange(self, line: bytes) -> bytes:
        return self.service.handle_line(line)


class TcpTransport:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.address = (host, port)
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._reader = None

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise TransportFailure(f"cannot reach verifier at {self.address}: {exc}") from exc
            self._reader = self._sock.makefile("rb")

    def exchange(self, line: bytes) -> bytes:
        self._connect()
        try:
            self._sock.sendall(line)
            reply = self._reader.readline(MAX_LINE + 1)
        except OSError as exc:
            self.close()
            raise TransportFailure(str(exc)) from exc
        if not reply:
            self.close()
            raise TransportFailure("verifier closed the connection")
        return reply

    def close(self) -> None:
        if self._sock is not None:
            self._reader.close()
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class VerifierClient:
    def __init__(self, transport: Transport, rand: RandBytes | None = None):
        self.transport = transport
        self._rand = rand or os.urandom

    def call(self, type_: str, body: dict[str, Any]) -> Envelope:
        request = Envelope(PROTOCOL_VERSION, type_, body, self._rand(CORRELATION_ID_SIZE))
        reply = self._exchange(request)
        if reply.type == ERROR:
            raise error_for_code(reply.body.get("code", ""))(reply.body.get("message", ""))
        return reply

    def _exchange(self, request: Envelope) -> Envelope:
        raw = self.transport.exchange(request.to_line())
        try:
            reply = Envelope.from_line(raw)
        except (DecodeError, ProtocolError) as exc:
            raise TransportFailure(f"unreadable reply: {exc}") from exc
        if reply.correlation_id != request.correlation_id:
            raise TransportFailure("reply correlation_id does not match request")
        return reply

    def request_nonce(self) -> dict[str, Any]:
        body = self.call(ATTEST_REQUEST, {}).body
        return {
            "nonce": encoding.unb64url(body["nonce"]),
            "issued_at": body["issued_at"],
            "verifier_id": body["verifier_id"],
            "verifier_key": encoding.unb64url(body["verifier_key"]),
        }

    def submit_evidence(self, evidence: Evidence) -> tuple[AttestationResult, bytes]:
        request = Envelope(PROTOCOL_VERSION, EVIDENCE_SUBMIT,
                           {"evidence": encoding.to_jsonable(evidence)}, self._rand(CORRELATION_ID_SIZE))
        reply = self._exchange(request)
        if reply.type == ERROR:
            raise error_for_code(reply.body.get("code", ""))(reply.body.get("message", ""))
        return _result_from(reply), request.correlation_id

    def publish_endorsement(self, endorsement: Endorsement) -> None:
        self.call(ENDORSEMENT_PUBLISH, {"endorsement": encoding.to_jsonable(endorsement)})

    def fetch_result(self, correlation_id: bytes) -> AttestationResult:
        reply = self.call(RESULT_FETCH, {"correlation_id": encoding.b64url(correlation_id)})
        return _result_from(reply)


def _result_from(reply: Envelope) -> AttestationResult:
    try:
        return encoding.from_jsonable(reply.body["result"], AttestationResult)
    except (KeyError, DecodeError) as exc:
        raise TransportFailure(f"reply carries no readable result: {exc}") from exc


ALL_CLAIMS = tuple(ClaimKind)


def run_attestation(
    device: DeviceState,
    client: VerifierClient,
    requested_claims: Iterable[ClaimKind | str] = ALL_CLAIMS,
    verifier_public_key: bytes | None = None,
    now: int | None = None,
    subjects: list[bytes] | None = None,
) -> AttestationResult:
    """Fetch a nonce, build evidence, submit it and return the checked result.

    The result is checked against ``verifier_public_key`` when given,
    otherwise against the key the verifier announced with the nonce.
    """
    issued = client.request_nonce()
    evidence = build_evidence(device, issued["nonce"], requested_claims, now=now, subjects=subjects)
    result, _ = client.submit_evidence(evidence)
    key = verifier_public_key if verifier_public_key is not None else issued["verifier_key"]
    if not verify_result(result, key):
        raise UnverifiedResult("verifier result failed signature or consistency check")
    return result
