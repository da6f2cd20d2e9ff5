"""Append-only persistence: versioned records, the head map, history links.

Two backends share one in-memory index. ``MemoryStore`` keeps everything in
dictionaries; ``FileStore`` additionally appends every record to a framed log
and rebuilds records and heads by replaying that log on open.

Log layout::

    b"SMDS" 0x01                         header
    [u32 length][frame bytes][u32 crc32]  repeated

where the frame bytes are the canonical encoding of the record document.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from . import codec
from .codec import Timestamp
from .errors import (
    BrokenChain,
    CorruptLog,
    DanglingPrevious,
    HashMismatch,
    KeyAlreadyExists,
    MissingRecord,
    NotFound,
    StoreReadOnly,
)
from .records import NominativeId, StoredRecord, VersionedId, conflict_versions

log = logging.getLogger(__name__)

MAGIC = b"SMDS"
FORMAT_VERSION = 0x01
HEADER = MAGIC + bytes([FORMAT_VERSION])
_U32 = struct.Struct(">I")

RECOVERY_MODES = ("raise", "recover", "truncate", "quarantine")


class Mode(str, Enum):
    ACID = "acid"
    BASE = "base"


def system_clock() -> Timestamp:
    return Timestamp.from_datetime(_dt.datetime.now(_dt.timezone.utc))


class MemoryStore:
    """In-memory backend; also the index layer under ``FileStore``."""

    def __init__(
        self,
        *,
        mode: Mode = Mode.ACID,
        clock: Callable[[], Timestamp] | None = None,
        registry: Any = None,
        serializable: bool = True,
    ):
        if registry is None:
            from .schema import SchemaRegistry

            registry = SchemaRegistry()
        self.mode = Mode(mode)
        self.clock = clock or system_clock
        self.registry = registry
        self.serializable = serializable
        # global commit critical section; also guards head-map snapshots
        self.commit_lock = threading.RLock()
        self._lock = threading.RLock()
        self._records: dict[VersionedId, StoredRecord] = {}
        self._encoded: dict[VersionedId, bytes] = {}
        self._heads: dict[NominativeId, int] = {}
        self._refs_out: dict[NominativeId, frozenset[NominativeId]] = {}
        self._refs_in: dict[NominativeId, set[NominativeId]] = {}
        self._last_txid = 0
        self.damaged: set[VersionedId] = set()
        self.corruption: CorruptLog | None = None
        self.read_only = False

    # -- records ---------------------------------------------------------

    def put_record(self, record: StoredRecord) -> VersionedId:
        self.put_records([record])
        return record.id

    def put_records(self, records: Iterable[StoredRecord]) -> list[VersionedId]:
        """Append a batch of records; validated as a whole, persisted in one write."""
        records = list(records)
        with self._lock:
            if self.read_only:
                raise StoreReadOnly("store was opened read-only")
            batch: set[VersionedId] = set()
            for rec in records:
                if rec.id in self._records or rec.id in batch:
                    raise KeyAlreadyExists(f"{rec.id} already stored")
                if not rec.verify():
                    raise HashMismatch(f"hash of {rec.id} does not match its content")
                prev = rec.previous
                if prev is not None:
                    if prev.nominative != rec.id.nominative or prev.version >= rec.id.version:
                        raise DanglingPrevious(f"{rec.id} cannot follow {prev}")
                    if prev not in self._records and prev not in batch:
                        raise DanglingPrevious(f"{rec.id} links to missing {prev}")
                batch.add(rec.id)
            blobs = [rec.encode() for rec in records]
            self._persist(blobs)
            for rec, blob in zip(records, blobs):
                self._insert(rec, blob)
        return [rec.id for rec in records]

    def _insert(self, rec: StoredRecord, blob: bytes) -> None:
        self._records[rec.id] = rec
        self._encoded[rec.id] = blob
        self._last_txid = max(self._last_txid, rec.origin.transaction_id)

    def _persist(self, blobs: list[bytes]) -> None:
        pass

    def get_record(self, vid: VersionedId) -> StoredRecord:
        try:
            return self._records[vid]
        except KeyError:
            raise NotFound(f"no record {vid}") from None

    def __contains__(self, vid: VersionedId) -> bool:
        return vid in self._records

    def __len__(self) -> int:
        return len(self._records)

    def record_ids(self) -> list[VersionedId]:
        with self._lock:
            return sorted(self._records)

    def records(self) -> Iterator[StoredRecord]:
        for vid in self.record_ids():
            yield self._records[vid]

    def encoded_record(self, vid: VersionedId) -> bytes:
        try:
            return self._encoded[vid]
        except KeyError:
            raise NotFound(f"no record {vid}") from None

    def encoded_snapshot(self) -> dict[VersionedId, bytes]:
        with self._lock:
            return dict(self._encoded)

    def record_set_digest(self) -> str:
        """SHA-256 over every (key, encoded record) pair in key order."""
        h = hashlib.sha256()
        with self._lock:
            for vid in sorted(self._encoded):
                key = str(vid).encode("utf-8")
                h.update(_U32.pack(len(key)) + key)
                blob = self._encoded[vid]
                h.update(_U32.pack(len(blob)) + blob)
        return h.hexdigest()

    # -- heads -----------------------------------------------------------

    def head_version(self, nominative: NominativeId | str) -> int | None:
        return self._heads.get(NominativeId.of(nominative))

    def head(self, nominative: NominativeId | str) -> VersionedId:
        nominative = NominativeId.of(nominative)
        version = self._heads.get(nominative)
        if version is None:
            raise NotFound(f"no object named {nominative}")
        return VersionedId(nominative, version)

    def head_record(self, nominative: NominativeId | str) -> StoredRecord:
        return self.get_record(self.head(nominative))

    def heads(self) -> dict[NominativeId, int]:
        """Consistent copy of the head map; never observes half a commit."""
        with self.commit_lock, self._lock:
            return dict(self._heads)

    def nominatives(self) -> list[NominativeId]:
        with self._lock:
            return sorted(self._heads)

    def advance_head(self, nominative: NominativeId | str, expected: int | None, new: int) -> bool:
        """Compare-and-set the head of ``nominative`` from ``expected`` to ``new``."""
        nominative = NominativeId.of(nominative)
        vid = VersionedId(nominative, new)
        with self._lock:
            if vid not in self._records:
                raise MissingRecord(f"cannot point head at missing {vid}")
            if self._heads.get(nominative) != expected:
                return False
            if expected is not None and new <= expected:
                raise ValueError(f"head of {nominative} must move forward ({expected} -> {new})")
            self._heads[nominative] = new
            self._reindex(nominative)
            return True

    def history(self, nominative: NominativeId | str) -> list[StoredRecord]:
        """Records from the head back to version 1, newest first."""
        nominative = NominativeId.of(nominative)
        vid: VersionedId | None = self.head(nominative)
        out: list[StoredRecord] = []
        while vid is not None:
            rec = self._records.get(vid)
            if rec is None:
                raise BrokenChain(f"history of {nominative} breaks at {vid}")
            out.append(rec)
            vid = rec.previous
        return out

    # -- transaction support ---------------------------------------------

    def next_transaction_id(self) -> int:
        with self._lock:
            self._last_txid += 1
            return self._last_txid

    @property
    def last_transaction_id(self) -> int:
        return self._last_txid

    # -- reverse dependency index ----------------------------------------

    def _outgoing(self, nominative: NominativeId) -> frozenset[NominativeId]:
        rec = self._records[VersionedId(nominative, self._heads[nominative])]
        payloads = [rec.payload]
        if rec.is_conflict_set:
            payloads = [self._records[v].payload for v in conflict_versions(rec.payload) if v in self._records]
        targets = set()
        for payload in payloads:
            if not isinstance(payload, dict):
                continue
            for ref in codec.references_in(payload.get("slots", payload)):
                try:
                    target = VersionedId.of(ref).nominative
                except ValueError:
                    continue
                if target != nominative:
                    targets.add(target)
        return frozenset(targets)

    def _reindex(self, nominative: NominativeId) -> None:
        old = self._refs_out.get(nominative, frozenset())
        new = self._outgoing(nominative)
        for target in old - new:
            self._refs_in.get(target, set()).discard(nominative)
        for target in new - old:
            self._refs_in.setdefault(target, set()).add(nominative)
        self._refs_out[nominative] = new

    def dependents(self, nominative: NominativeId | str) -> set[NominativeId]:
        """Nominatives whose head references any version of ``nominative``."""
        with self._lock:
            return set(self._refs_in.get(NominativeId.of(nominative), ()))

    def dependencies(self, nominative: NominativeId | str) -> set[NominativeId]:
        with self._lock:
            return set(self._refs_out.get(NominativeId.of(nominative), ()))

    def _rebuild_heads(self) -> None:
        self._heads.clear()
        for vid in self._records:
            if vid.version > self._heads.get(vid.nominative, 0):
                self._heads[vid.nominative] = vid.version
        self._refs_in.clear()
        self._refs_out.clear()
        for nominative in self._heads:
            self._reindex(nominative)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FileStore(MemoryStore):
    """Log-backed store. Records and heads are rebuilt by replaying the log."""

    def __init__(self, path: str | os.PathLike, *, recovery: str = "recover", sync: bool = True, **kwargs):
        if recovery not in RECOVERY_MODES:
            raise ValueError(f"recovery must be one of {RECOVERY_MODES}")
        super().__init__(**kwargs)
        self.path = Path(path)
        self.sync = sync
        self._fh = None
        self._replay(recovery)
        if not self.read_only:
            self._fh = open(self.path, "ab")

    def _replay(self, recovery: str) -> None:
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(HEADER)
            return
        data = self.path.read_bytes()
        good_end = self._load_frames(data, quarantine=recovery == "quarantine")
        self._rebuild_heads()
        if self.damaged:
            # quarantined frames stay inspectable but nothing may build on them
            self.read_only = True
        if self.corruption is None:
            return
        log.warning("%s: %s", self.path, self.corruption)
        if recovery == "raise":
            self.read_only = True
            self.corruption.recovered = self
            raise self.corruption
        if recovery == "truncate":
            with open(self.path, "r+b") as fh:
                fh.truncate(max(good_end, len(HEADER)))
                if good_end < len(HEADER):
                    fh.seek(0)
                    fh.write(HEADER)
            return
        self.read_only = True

    def _load_frames(self, data: bytes, quarantine: bool) -> int:
        """Load frames from ``data``; returns the offset just past the last good frame."""
        if data[: len(HEADER)] != HEADER:
            self.corruption = CorruptLog(0, "bad header")
            return 0
        pos = len(HEADER)
        while pos < len(data):
            start = pos
            if pos + 4 > len(data):
                self.corruption = CorruptLog(start, "truncated frame length")
                return start
            (length,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + length + 4 > len(data):
                self.corruption = CorruptLog(start, "truncated frame")
                return start
            blob = data[pos : pos + length]
            pos += length
            (crc,) = _U32.unpack_from(data, pos)
            pos += 4
            crc_ok = zlib.crc32(blob) == crc
            if not crc_ok and not quarantine:
                self.corruption = CorruptLog(start, "frame checksum mismatch")
                return start
            try:
                rec = StoredRecord.from_document(codec.decode(blob))
            except (codec.CodecError, KeyError, TypeError, ValueError) as exc:
                self.corruption = CorruptLog(start, f"undecodable frame ({exc})")
                return start
            if rec.id in self._records:
                self.corruption = CorruptLog(start, f"duplicate key {rec.id}")
                return start
            hash_ok = rec.verify()
            if not hash_ok and not quarantine:
                self.corruption = CorruptLog(start, f"record hash mismatch for {rec.id}")
                return start
            if not (crc_ok and hash_ok):
                # keep it visible so integrity verification can report it
                self.damaged.add(rec.id)
            self._insert(rec, blob)
        return pos

    def _persist(self, blobs: list[bytes]) -> None:
        buf = bytearray()
        for blob in blobs:
            buf += _U32.pack(len(blob))
            buf += blob
            buf += _U32.pack(zlib.crc32(blob))
        self._fh.write(buf)
        self._fh.flush()
        if self.sync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class BackendConfig:
    kind: str = "memory"
    path: str | os.PathLike | None = None
    mode: Mode = Mode.ACID
    clock: Callable[[], Timestamp] | None = None
    registry: Any = None
    recovery: str = "recover"
    sync: bool = True
    serializable: bool = True

    @classmethod
    def parse(cls, spec: str, **kwargs) -> BackendConfig:
        """``mem`` / ``memory`` or ``file:PATH`` (a bare path also means file)."""
        if spec in ("mem", "memory"):
            return cls(kind="memory", **kwargs)
        if spec.startswith("file:"):
            spec = spec[len("file:") :]
        return cls(kind="file", path=spec, **kwargs)


Store = MemoryStore


def open_backend(config: BackendConfig) -> MemoryStore:
    common = dict(
        mode=config.mode,
        clock=config.clock,
        registry=config.registry,
        serializable=config.serializable,
    )
    if config.kind == "memory":
        return MemoryStore(**common)
    if config.kind == "file":
        if config.path is None:
            raise ValueError("file backend needs a path")
        return FileStore(config.path, recovery=config.recovery, sync=config.sync, **common)
    raise ValueError(f"unknown backend kind {config.kind!r}")


class ReadOnlyStoreView:
    """What domain predicates get to see: lookups only, no writes."""

    def __init__(self, store: MemoryStore):
        self._store = store

    def get_record(self, vid: VersionedId) -> StoredRecord:
        return self._store.get_record(vid)

    def head(self, nominative: NominativeId) -> VersionedId:
        return self._store.head(nominative)

    def head_version(self, nominative: NominativeId) -> int | None:
        return self._store.head_version(nominative)

    def history(self, nominative: NominativeId) -> list[StoredRecord]:
        return self._store.history(nominative)

    def exists(self, vid: VersionedId) -> bool:
        return vid in self._store

    def schema_of(self, vid: VersionedId) -> str | None:
        return self._store.get_record(vid).schema_name

    def slots_of(self, vid: VersionedId) -> dict:
        return self._store.get_record(vid).slots

    def dependents(self, nominative: NominativeId) -> set[NominativeId]:
        return self._store.dependents(nominative)
