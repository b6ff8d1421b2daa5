"""A minimal confirmed ledger: submission order is confirmation order."""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path

from . import encoding
from .encoding import sha256, verify_body
from .errors import BadSignature, DigestMismatch, DuplicateTx, MalformedKey

LEDGER_FILE = "ledger.log"


@dataclass(frozen=True)
class LedgerTx:
    tx_digest: bytes
    signer_public_key: bytes
    payload: bytes
    signature: bytes

    @classmethod
    def create(cls, payload: bytes, signer_public_key: bytes, signature: bytes) -> LedgerTx:
        return cls(sha256(payload), signer_public_key, payload, signature)


class ConfirmedLedger:
    def __init__(self, path: str | os.PathLike | None = None):
        self._confirmed: list[LedgerTx] = []
        self._positions: dict[bytes, int] = {}
        self._lock = threading.Lock()
        self._path = Path(path) if path is not None else None
        if self._path is not None and self._path.exists():
            for line in self._path.read_bytes().splitlines():
                if line.strip():
                    self._append(encoding.canonical_decode(line, LedgerTx))

    @classmethod
    def in_directory(cls, directory: str | os.PathLike) -> ConfirmedLedger:
        return cls(Path(directory) / LEDGER_FILE)

    def _append(self, tx: LedgerTx) -> int:
        pos = len(self._confirmed)
        self._confirmed.append(tx)
        self._positions[tx.tx_digest] = pos
        return pos

    def submit(self, tx: LedgerTx) -> int:
        if sha256(tx.payload) != tx.tx_digest:
            raise DigestMismatch("tx_digest is not SHA-256 of the payload")
        try:
            ok = verify_body(tx.payload, tx.signature, tx.signer_public_key)
        except MalformedKey:
            ok = False
        if not ok:
            raise BadSignature("transaction signature does not verify")
        with self._lock:
            if tx.tx_digest in self._positions:
                raise DuplicateTx(f"transaction {tx.tx_digest.hex()} already confirmed")
            if self._path is not None:
                with self._path.open("ab") as fh:
                    fh.write(encoding.canonical_encode(tx) + b"\n")
            return self._append(tx)

    def query_by_key(self, public_key: bytes) -> list[tuple[int, bytes]]:
        with self._lock:
            snapshot = list(self._confirmed)
        return [(i, tx.tx_digest) for i, tx in enumerate(snapshot) if tx.signer_public_key == public_key]

    def position(self, tx_digest: bytes) -> int | None:
        return self._positions.get(tx_digest)

    def __len__(self) -> int:
        return len(self._confirmed)

    def __getitem__(self, position: int) -> LedgerTx:
        return self._confirmed[position]


def submit(ledger: ConfirmedLedger, tx: LedgerTx) -> int:
    return ledger.submit(tx)


def query_by_key(ledger: ConfirmedLedger, public_key: bytes) -> list[tuple[int, bytes]]:
    return ledger.query_by_key(public_key)
