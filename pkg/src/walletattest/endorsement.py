"""Manufacturer endorsements and the verifier-side endorsement store."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from . import encoding
from .device import ProvisioningRecord, normalize_manifest
from .errors import DecodeError, EmptyManifest, InvalidProvisioningRecord, UnverifiedEndorsement
from .evidence import Endorsement

logger = logging.getLogger(__name__)

ANCHORS_FILE = "anchors.json"
ENDORSEMENT_LOG = "endorsements.log"


@dataclass(frozen=True)
class EndorserAnchor:
    endorser_id: str
    public_key: bytes


def load_anchors(path: str | os.PathLike) -> dict[str, bytes]:
    entries = encoding.canonical_decode(Path(path).read_bytes(), list[EndorserAnchor])
    return {a.endorser_id: a.public_key for a in entries}


def save_anchors(path: str | os.PathLike, anchors: dict[str, bytes]) -> None:
    entries = [EndorserAnchor(k, v) for k, v in sorted(anchors.items())]
    Path(path).write_bytes(encoding.canonical_encode(entries))


def issue_endorsement(
    endorser_key: bytes,
    endorser_id: str,
    record: ProvisioningRecord,
    issued_at: int | None = None,
) -> Endorsement:
    """Sign reference values and key identities for a device off the line.

    The AK certification in the record is checked against the EK first; the
    manufacturer will not vouch for an AK its own EK did not certify.
    """
    if not record.component_manifest:
        raise EmptyManifest("device has no component manifest")
    cert = record.ak_certification
    if cert.subject_public != record.ak_public or cert.device_id != record.device_id:
        raise InvalidProvisioningRecord("AK certification does not describe this AK")
    if not (cert.attributes.fixed_to_device and cert.attributes.created_inside):
        raise InvalidProvisioningRecord("AK is not hardware-bound")
    if not cert.verify(record.ek_public):
        raise InvalidProvisioningRecord("AK certification not signed by the EK")
    e = Endorsement(
        endorser_id=endorser_id,
        device_id=record.device_id,
        reference_values=list(normalize_manifest(record.component_manifest)),
        ek_public=record.ek_public,
        ak_public=record.ak_public,
        issued_at=int(time.time()) if issued_at is None else issued_at,
    )
    return e.signed_with(endorser_key)


def _sort_key(e: Endorsement):
    return (-e.issued_at, encoding.canonical_encode(e))


class EndorsementStore:
    """Endorsements admitted under registered trust anchors.

    With a ``directory`` the store is backed by an append-only log of
    canonical records and reloads it on construction. One writer at a time;
    readers work on snapshots.
    """

    def __init__(self, anchors: dict[str, bytes] | None = None,
                 directory: str | os.PathLike | None = None):
        self._anchors = dict(anchors or {})
        self._records: dict[tuple[str, bytes, int], Endorsement] = {}
        self._lock = threading.Lock()
        self._log_path = None
        if directory is not None:
            self._log_path = Path(directory) / ENDORSEMENT_LOG
            self._replay()

    @property
    def anchors(self) -> dict[str, bytes]:
        return dict(self._anchors)

    def register_anchor(self, endorser_id: str, public_key: bytes) -> None:
        with self._lock:
            self._anchors[endorser_id] = bytes(public_key)

    def _verifies(self, e: Endorsement) -> bool:
        key = self._anchors.get(e.endorser_id)
        if key is None:
            return False
        return e.verify(key)

    def _replay(self) -> None:
        if not self._log_path.exists():
            return
        with self._log_path.open("rb") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    e = encoding.canonical_decode(line, Endorsement)
                except DecodeError as exc:
                    logger.warning("%s:%d: skipping undecodable record: %s", self._log_path, lineno, exc)
                    continue
                self._records[(e.endorser_id, e.device_id, e.issued_at)] = e

    def store(self, e: Endorsement) -> None:
        if not self._verifies(e):
            raise UnverifiedEndorsement(
                f"endorsement from {e.endorser_id!r} does not verify under a registered anchor"
            )
        with self._lock:
            if self._log_path is not None:
                with self._log_path.open("ab") as fh:
                    fh.write(encoding.canonical_encode(e) + b"\n")
            # newest write wins for the same (endorser, device, issued_at)
            self._records[(e.endorser_id, e.device_id, e.issued_at)] = e

    def lookup(self, device_id: bytes) -> list[Endorsement]:
        """Verified endorsements for ``device_id``, newest first."""
        with self._lock:
            candidates = [e for e in self._records.values() if e.device_id == device_id]
        good = [e for e in candidates if self._verifies(e)]
        return sorted(good, key=_sort_key)

    def __len__(self) -> int:
        return len(self._records)

    def all(self) -> Iterable[Endorsement]:
        with self._lock:
            return sorted(self._records.values(), key=_sort_key)


def store_endorsement(store: EndorsementStore, e: Endorsement) -> None:
    store.store(e)


def lookup(store: EndorsementStore, device_id: bytes) -> list[Endorsement]:
    return store.lookup(device_id)
