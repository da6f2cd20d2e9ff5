"""Identifiers, origins and the immutable stored record."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from . import codec
from .codec import Reference, Timestamp

_FORBIDDEN = ("/", "@")


@dataclass(frozen=True, order=True)
class NominativeId:
    """Stable, version-independent name of an object.

    Composite names (for example a sensor owned by a patient) are multi-segment
    paths rendered with ``/``.
    """

    segments: tuple[str, ...]

    def __post_init__(self):
        segs = self.segments
        if isinstance(segs, str):
            segs = (segs,)
        segs = tuple(segs)
        if not segs:
            raise ValueError("nominative ID needs at least one segment")
        for seg in segs:
            if not isinstance(seg, str) or not seg:
                raise ValueError(f"invalid ID segment {seg!r}")
            if any(ch in seg for ch in _FORBIDDEN):
                raise ValueError(f"ID segment {seg!r} may not contain '/' or '@'")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def parse(cls, text: str) -> NominativeId:
        return cls(tuple(text.split("/")))

    @classmethod
    def of(cls, value: NominativeId | str | Iterable[str]) -> NominativeId:
        if isinstance(value, NominativeId):
            return value
        if isinstance(value, str):
            return cls.parse(value)
        return cls(tuple(value))

    def child(self, segment: str) -> NominativeId:
        return NominativeId(self.segments + (segment,))

    def at(self, version: int) -> VersionedId:
        return VersionedId(self, version)

    def __str__(self) -> str:
        return "/".join(self.segments)


@dataclass(frozen=True, order=True)
class VersionedId:
    nominative: NominativeId
    version: int

    def __post_init__(self):
        if isinstance(self.version, bool) or not isinstance(self.version, int) or self.version < 1:
            raise ValueError(f"version must be a positive integer, got {self.version!r}")

    @classmethod
    def parse(cls, text: str) -> VersionedId:
        name, sep, version = text.rpartition("@")
        if not sep or not version.isdigit():
            raise ValueError(f"not a versioned ID: {text!r}")
        return cls(NominativeId.parse(name), int(version))

    @classmethod
    def of(cls, value: VersionedId | Reference | str) -> VersionedId:
        if isinstance(value, VersionedId):
            return value
        if isinstance(value, Reference):
            return cls.parse(value.target)
        return cls.parse(value)

    def ref(self) -> Reference:
        return Reference(str(self))

    def __str__(self) -> str:
        return f"{self.nominative}@{self.version}"


@dataclass(frozen=True)
class Origin:
    """Who wrote a record, when, with which permissions, and in which transaction."""

    transaction_id: int
    role: str
    timestamp: Timestamp
    permission_token: str = ""

    def to_document(self) -> dict:
        return {
            "transaction_id": self.transaction_id,
            "role": self.role,
            "timestamp": self.timestamp,
            "permission_token": self.permission_token,
        }

    @classmethod
    def from_document(cls, doc: dict) -> Origin:
        return cls(
            transaction_id=doc["transaction_id"],
            role=doc["role"],
            timestamp=doc["timestamp"],
            permission_token=doc["permission_token"],
        )


@dataclass(frozen=True)
class Status:
    """Validity flag. An invalidating version names the version it revokes."""

    valid: bool = True
    reason: str = ""
    revoked: VersionedId | None = None

    @classmethod
    def invalid(cls, reason: str, revoked: VersionedId | None = None) -> Status:
        return cls(False, reason, revoked)

    def to_document(self) -> dict:
        return {
            "state": "valid" if self.valid else "invalid",
            "reason": self.reason,
            "revoked": self.revoked.ref() if self.revoked else None,
        }

    @classmethod
    def from_document(cls, doc: dict) -> Status:
        if doc["state"] not in ("valid", "invalid"):
            raise ValueError(f"unknown status {doc['state']!r}")
        revoked = doc.get("revoked")
        return cls(
            valid=doc["state"] == "valid",
            reason=doc.get("reason", ""),
            revoked=VersionedId.of(revoked) if revoked is not None else None,
        )


VALID = Status()

# payload envelope kinds
ENTITY = "entity"
CONFLICT_SET = "conflict-set"


def hashed_content(payload: Any, origin: Origin, previous: VersionedId | None) -> dict:
    return {
        "payload": payload,
        "origin": origin.to_document(),
        "previous": previous.ref() if previous else None,
    }


@dataclass(frozen=True)
class StoredRecord:
    """One immutable version of one object."""

    id: VersionedId
    payload: dict
    origin: Origin
    previous: VersionedId | None
    hash: bytes
    status: Status = field(default=VALID)

    @classmethod
    def create(
        cls,
        id: VersionedId,
        payload: dict,
        origin: Origin,
        previous: VersionedId | None = None,
        status: Status = VALID,
    ) -> StoredRecord:
        digest = codec.content_hash(hashed_content(payload, origin, previous))
        return cls(id, payload, origin, previous, digest, status)

    def verify(self) -> bool:
        return codec.verify_bits(hashed_content(self.payload, self.origin, self.previous), self.hash)

    @property
    def kind(self) -> str:
        return self.payload.get("kind", ENTITY) if isinstance(self.payload, dict) else ENTITY

    @property
    def is_conflict_set(self) -> bool:
        return self.kind == CONFLICT_SET

    @property
    def schema_name(self) -> str | None:
        return self.payload.get("schema") if isinstance(self.payload, dict) else None

    @property
    def slots(self) -> dict:
        return self.payload.get("slots", {})

    def to_document(self) -> dict:
        return {
            "id": str(self.id),
            "payload": self.payload,
            "origin": self.origin.to_document(),
            "previous": self.previous.ref() if self.previous else None,
            "hash": self.hash.hex(),
            "status": self.status.to_document(),
        }

    @classmethod
    def from_document(cls, doc: dict) -> StoredRecord:
        digest = bytes.fromhex(doc["hash"])
        if len(digest) != codec.DIGEST_SIZE:
            raise ValueError("record hash must be 32 bytes")
        previous = doc["previous"]
        return cls(
            id=VersionedId.parse(doc["id"]),
            payload=doc["payload"],
            origin=Origin.from_document(doc["origin"]),
            previous=VersionedId.of(previous) if previous is not None else None,
            hash=digest,
            status=Status.from_document(doc["status"]),
        )

    def encode(self) -> bytes:
        return codec.encode_canonical(self.to_document())


def entity_payload(schema: str, slots: dict, originators: dict) -> dict:
    return {"kind": ENTITY, "schema": schema, "slots": slots, "originators": originators}


def conflict_set_payload(versions: Iterable[VersionedId]) -> dict:
    """Conflict-set body: a sorted, de-duplicated list of contending versions."""
    unique = sorted(set(versions))
    return {"kind": CONFLICT_SET, "versions": [v.ref() for v in unique]}


def conflict_versions(payload: dict) -> list[VersionedId]:
    return [VersionedId.of(r) for r in payload.get("versions", [])]
