"""Durable persistence for one ASN instance.

Append-only record logs under one directory per instance::

    <root>/messages.log        message bodies, moderation status, processed
                               envelope markers
    <root>/inbox/<user>.log    per-user inbox entries (user id percent-encoded)
    <root>/meta.log            users, circles, roles, peers, replicas
    <root>/snapshots/<seq>/    compacted state in the same log formats

Record framing, byte-exact (see the golden-file test)::

    offset  size  field
    0       4     payload length N, unsigned big-endian
    4       4     CRC-32 of the payload, unsigned big-endian
    8       N     payload: canonical JSON (sorted keys, compact separators,
                  ASCII-escaped), UTF-8 bytes

Every append is flushed and fsynced before the call returns (``sync=False``
trades that away for benchmarking).  Recovery scans the newest snapshot
marked COMPLETE, replays the live logs on top, and truncates any torn
tail record it finds.  All meta records are whole-state upserts, which is
what makes snapshot + replay idempotent.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import urllib.parse
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Optional

from .errors import DuplicateIdDifferentContent, UnpairedOrigin
from .model import Message
from .wire import ReplicaRecord, canonical_json

logger = logging.getLogger(__name__)

_HEADER = struct.Struct(">II")

SNAPSHOT_MARKER = "COMPLETE"


@dataclass(frozen=True)
class InboxEntry:
    message_id: str
    seq: int
    read: bool = False


def encode_record(payload: dict) -> bytes:
    body = canonical_json(payload)
    return _HEADER.pack(len(body), zlib.crc32(body)) + body


def read_records(path: Path) -> tuple[list[dict], int]:
    """Decode frames from ``path``; returns (records, bytes of valid prefix).

    Stops at the first truncated or checksum-failing frame: everything
    after a torn write is unacknowledged by construction.
    """
    records: list[dict] = []
    good = 0
    if not path.exists():
        return records, 0
    data = path.read_bytes()
    offset = 0
    while offset + _HEADER.size <= len(data):
        length, crc = _HEADER.unpack_from(data, offset)
        start = offset + _HEADER.size
        end = start + length
        if end > len(data):
            break
        body = data[start:end]
        if zlib.crc32(body) != crc:
            logger.warning("checksum mismatch in %s at offset %d; truncating", path, offset)
            break
        records.append(json.loads(body.decode("utf-8")))
        offset = end
        good = offset
    return records, good


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class Store:
    """Exclusive-writer durable state for one ASN instance."""

    def __init__(self, root: str | Path, sync: bool = True):
        self.root = Path(root)
        self.sync = sync
        self._lock = threading.RLock()
        self._files: dict[Path, BinaryIO] = {}

        self._messages: dict[str, Message] = {}
        self._status: dict[str, str] = {}
        self._envelopes: set[str] = set()
        self._inboxes: dict[str, list[InboxEntry]] = {}
        self._inbox_index: dict[str, dict[str, int]] = {}
        self._peers: dict[str, dict] = {}
        self._replica_versions: dict[str, int] = {}
        self.replayed_meta: list[dict] = []

        self._recover()

    # --- paths -----------------------------------------------------------------

    @property
    def _messages_log(self) -> Path:
        return self.root / "messages.log"

    @property
    def _meta_log(self) -> Path:
        return self.root / "meta.log"

    def _inbox_log(self, user: str) -> Path:
        return self.root / "inbox" / f"{urllib.parse.quote(user, safe='')}.log"

    def _snapshot_root(self) -> Path:
        return self.root / "snapshots"

    # --- recovery ----------------------------------------------------------------

    def _recover(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "inbox").mkdir(exist_ok=True)

        snapshot = self._latest_snapshot()
        sources = ([snapshot] if snapshot else []) + [self.root]
        for base in sources:
            trim = base == self.root  # only live logs get torn tails repaired
            self._replay_log(base / "messages.log", self._apply_message_record, trim)
            self._replay_log(base / "meta.log", self._apply_meta_record, trim)
            inbox_dir = base / "inbox"
            if inbox_dir.is_dir():
                for log in sorted(inbox_dir.iterdir()):
                    self._replay_log(log, self._apply_inbox_record, trim)

    def _latest_snapshot(self) -> Optional[Path]:
        root = self._snapshot_root()
        if not root.is_dir():
            return None
        complete = [d for d in root.iterdir()
                    if d.is_dir() and (d / SNAPSHOT_MARKER).exists()]
        if not complete:
            return None
        return max(complete, key=lambda d: int(d.name))

    def _replay_log(self, path: Path, apply, trim: bool) -> None:
        records, good = read_records(path)
        if trim and path.exists() and good < path.stat().st_size:
            with open(path, "r+b") as fh:
                fh.truncate(good)
        for record in records:
            apply(record)

    def _apply_message_record(self, record: dict) -> None:
        if record["t"] == "message":
            self._messages[record["id"]] = Message(
                id=record["id"], author=record["author"], content=record["content"],
                tags=frozenset(record["tags"]), conflicts=frozenset(record["conflicts"]),
            )
            self._status[record["id"]] = record["status"]
        elif record["t"] == "envelope":
            self._envelopes.add(record["id"])

    def _apply_inbox_record(self, record: dict) -> None:
        user, mid, seq = record["user"], record["mid"], record["seq"]
        index = self._inbox_index.setdefault(user, {})
        if mid in index:
            return
        index[mid] = seq
        self._inboxes.setdefault(user, []).append(InboxEntry(mid, seq))

    def _apply_meta_record(self, record: dict) -> None:
        self.replayed_meta.append(record)
        if record["t"] == "peer":
            self._peers[record["asn"]] = record
        elif record["t"] == "replica":
            cid = record["circle"]["id"]
            version = record["version"]
            if version > self._replica_versions.get(cid, 0):
                self._replica_versions[cid] = version

    # --- framed appends -----------------------------------------------------------

    def _append(self, path: Path, payload: dict) -> None:
        fh = self._files.get(path)
        if fh is None:
            created = not path.exists()
            fh = open(path, "ab")
            self._files[path] = fh
            if created and self.sync:
                _fsync_dir(path.parent)
        fh.write(encode_record(payload))
        fh.flush()
        if self.sync:
            os.fsync(fh.fileno())

    # --- messages -------------------------------------------------------------------

    def put_message(self, message: Message, status: str = "approved") -> None:
        with self._lock:
            existing = self._messages.get(message.id)
            if existing is not None:
                if existing != message:
                    raise DuplicateIdDifferentContent(message.id)
                return
            self._write_message(message, status)

    def _write_message(self, message: Message, status: str) -> None:
        self._append(self._messages_log, {
            "t": "message", "id": message.id, "author": message.author,
            "content": message.content, "tags": sorted(message.tags),
            "conflicts": sorted(message.conflicts), "status": status,
        })
        self._messages[message.id] = message
        self._status[message.id] = status

    def set_message_status(self, message_id: str, status: str) -> None:
        with self._lock:
            message = self._messages[message_id]
            self._write_message(message, status)

    def get_message(self, message_id: str) -> Optional[tuple[Message, str]]:
        message = self._messages.get(message_id)
        if message is None:
            return None
        return message, self._status[message.id]

    def message_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._messages)

    # --- processed envelopes ------------------------------------------------------

    def envelope_processed(self, envelope_id: str) -> bool:
        return envelope_id in self._envelopes

    def mark_envelope_processed(self, envelope_id: str) -> bool:
        """Durably record the envelope id; False when already processed."""
        with self._lock:
            if envelope_id in self._envelopes:
                return False
            self._append(self._messages_log, {"t": "envelope", "id": envelope_id})
            self._envelopes.add(envelope_id)
            return True

    # --- inboxes ----------------------------------------------------------------------

    def append_inbox(self, user: str, message_id: str) -> int:
        """Exactly-once per (user, message): redelivery returns the prior seq."""
        with self._lock:
            index = self._inbox_index.setdefault(user, {})
            if message_id in index:
                return index[message_id]
            seq = len(index) + 1
            self._append(self._inbox_log(user), {
                "t": "inbox", "user": user, "mid": message_id, "seq": seq,
            })
            index[message_id] = seq
            self._inboxes.setdefault(user, []).append(InboxEntry(message_id, seq))
            return seq

    def inbox(self, user: str) -> list[InboxEntry]:
        with self._lock:
            return list(self._inboxes.get(user, []))

    def inbox_users(self) -> list[str]:
        with self._lock:
            return sorted(self._inbox_index)

    # --- meta --------------------------------------------------------------------------

    def append_meta(self, record: dict) -> None:
        with self._lock:
            self._append(self._meta_log, record)
            if record["t"] == "peer":
                self._peers[record["asn"]] = record

    def upsert_peer(self, asn: str, endpoint: str, secret: str, state: str) -> None:
        self.append_meta({"t": "peer", "asn": asn, "endpoint": endpoint,
                          "secret": secret, "state": state})

    @property
    def peers(self) -> dict[str, dict]:
        return dict(self._peers)

    # --- replicas ------------------------------------------------------------------------

    def replica_version(self, circle_id: str) -> int:
        return self._replica_versions.get(circle_id, 0)

    def apply_replica_update(self, replica: ReplicaRecord) -> str:
        """'applied' iff strictly newer than what is stored, else 'stale'."""
        with self._lock:
            peer = self._peers.get(replica.origin)
            if peer is None or peer.get("state") != "active":
                raise UnpairedOrigin(replica.origin)
            if replica.version <= self._replica_versions.get(replica.circle_id, 0):
                return "stale"
            self._append(self._meta_log, {
                "t": "replica", "origin": replica.origin,
                "version": replica.version, "circle": replica.circle,
            })
            self._replica_versions[replica.circle_id] = replica.version
            return "applied"

    # --- compaction -------------------------------------------------------------------------

    def compact(self, meta_state: Iterable[dict]) -> int:
        """Write a snapshot of current state and reset the live logs.

        ``meta_state`` is the caller's full set of current meta records
        (users, circles, roles, peers, replicas); messages and inboxes come
        from this store's own indices.
        """
        with self._lock:
            root = self._snapshot_root()
            root.mkdir(exist_ok=True)
            seq = 1 + max((int(d.name) for d in root.iterdir() if d.is_dir()),
                          default=0)
            target = root / str(seq)
            (target / "inbox").mkdir(parents=True)

            with open(target / "messages.log", "wb") as fh:
                for mid in sorted(self._messages):
                    m = self._messages[mid]
                    fh.write(encode_record({
                        "t": "message", "id": m.id, "author": m.author,
                        "content": m.content, "tags": sorted(m.tags),
                        "conflicts": sorted(m.conflicts),
                        "status": self._status[m.id],
                    }))
                for eid in sorted(self._envelopes):
                    fh.write(encode_record({"t": "envelope", "id": eid}))
                fh.flush()
                os.fsync(fh.fileno())

            with open(target / "meta.log", "wb") as fh:
                for record in meta_state:
                    fh.write(encode_record(record))
                fh.flush()
                os.fsync(fh.fileno())

            for user, entries in sorted(self._inboxes.items()):
                path = target / "inbox" / f"{urllib.parse.quote(user, safe='')}.log"
                with open(path, "wb") as fh:
                    for entry in entries:
                        fh.write(encode_record({
                            "t": "inbox", "user": user,
                            "mid": entry.message_id, "seq": entry.seq,
                        }))
                    fh.flush()
                    os.fsync(fh.fileno())

            _fsync_dir(target / "inbox")
            (target / SNAPSHOT_MARKER).write_bytes(b"")
            _fsync_dir(target)
            _fsync_dir(root)

            # Snapshot complete; live logs can now restart empty.
            self._close_files()
            for path in [self._messages_log, self._meta_log,
                         *(self.root / "inbox").glob("*.log")]:
                if path.exists():
                    with open(path, "wb") as fh:
                        fh.flush()
                        os.fsync(fh.fileno())
            return seq

    # --- lifecycle ---------------------------------------------------------------------------

    def _close_files(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files.clear()

    def close(self) -> None:
        with self._lock:
            self._close_files()

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
