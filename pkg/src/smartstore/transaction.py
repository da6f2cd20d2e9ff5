"""Role-scoped transactions over the append-only store.

A transaction takes a snapshot of the head map, materializes entities lazily
into mutable handles, tags every slot write with the acting role, and on
commit serializes the dirty handles into new immutable records::

    def body(tx):
        patient = tx.create_entity("Patient", "Patient1")
        patient["names"] = "John"
        tx.commit()

    outcome = with_role_do_transaction(store, hospital_service, body)

``commit()`` and ``abort()`` unwind the body like exceptions; anything else
that escapes the body, or a body that simply returns, rolls back.
"""

from __future__ import annotations

import contextvars
import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .codec import Reference, Timestamp
from .errors import (
    AlreadyExists,
    Conflicted,
    InactiveContext,
    IntegrityRejected,
    NotFound,
    ReadOnlyHandle,
    ResolveConflictFirst,
    TypecheckFailed,
    UnknownRole,
)
from .records import (
    VALID,
    NominativeId,
    Origin,
    Status,
    StoredRecord,
    VersionedId,
    conflict_set_payload,
    conflict_versions,
    entity_payload,
)
from .schema import ConcreteRole, EntitySchema, SetOf, Violation
from .store import MemoryStore, Mode, ReadOnlyStoreView

log = logging.getLogger(__name__)

ACTIVE, COMMITTED, ABORTED = "active", "committed", "aborted"

_current: contextvars.ContextVar[TransactionContext | None] = contextvars.ContextVar(
    "smartstore_transaction", default=None
)


def current_transaction() -> TransactionContext | None:
    return _current.get()


class _Signal(BaseException):
    # BaseException so a body's ``except Exception`` cannot swallow it
    def __init__(self, context: TransactionContext):
        super().__init__()
        self.context = context


class CommitSignal(_Signal):
    pass


class AbortSignal(_Signal):
    pass


@dataclass
class Outcome:
    status: str  # committed | aborted | conflicted | rejected
    written: list[VersionedId] = field(default_factory=list)
    conflict_sets: list[VersionedId] = field(default_factory=list)
    transaction_id: int | None = None
    timestamp: Timestamp | None = None
    error: BaseException | None = None
    value: Any = None

    @property
    def committed(self) -> bool:
        return self.status == "committed"

    @property
    def conflicted(self) -> bool:
        return self.status == "conflicted"

    def raise_for_status(self) -> Outcome:
        if self.error is not None:
            raise self.error
        return self


def default_permission_token(role: ConcreteRole) -> str:
    return f"role:{role.role_id}"


class EntityHandle:
    """Transaction-local, mutable view of one entity version.

    Slot writes are type-checked immediately and retag the slot with the acting
    role. Reference slots hold :class:`VersionedId` values; assigning a handle
    stores a reference to it.
    """

    def __init__(
        self,
        ctx: TransactionContext,
        nominative: NominativeId,
        schema: EntitySchema,
        slots: dict,
        originators: dict,
        base_version: int | None,
        status: Status = VALID,
        read_only: bool = False,
        version: int | None = None,
    ):
        self._ctx = ctx
        self.nominative = nominative
        self.schema = schema
        self._slots = slots
        self.slot_originators = originators
        self.base_version = base_version
        self.status = status
        self.read_only = read_only
        # version this handle was read from; differs from base_version only when
        # resolving a conflict set
        self.version = base_version if version is None else version

    def __repr__(self) -> str:
        return f"<EntityHandle {self.schema.name} {self.nominative}@{self.version}>"

    @property
    def is_valid(self) -> bool:
        return self.status.valid

    @property
    def dirty(self) -> bool:
        return self.nominative in self._ctx.dirty and self._ctx.handles.get(self.nominative) is self

    def ref(self) -> VersionedId:
        """Reference to this entity; rebound at commit if this transaction rewrites it."""
        if self.read_only:
            return VersionedId(self.nominative, self.version)
        return VersionedId(self.nominative, self._ctx._placeholder(self))

    def slot_names(self) -> list[str]:
        return list(self._slots)

    def read_slot(self, name: str) -> Any:
        self._ctx._require_active()
        self._ctx.registry.slot_type(self.schema, name)
        return copy.deepcopy(self._slots[name])

    def write_slot(self, name: str, value: Any) -> None:
        ctx = self._ctx
        ctx._require_active()
        if self.read_only:
            raise ReadOnlyHandle(f"{self.nominative}@{self.version} is a historical version")
        slot_type = ctx.registry.slot_type(self.schema, name)
        clean = ctx.registry.normalize(slot_type, _unwrap_handles(value), name)
        self._slots[name] = clean
        if self.slot_originators.get(name) != ctx.role.role_id:
            self.slot_originators[name] = ctx.role.role_id
        ctx._mark_dirty(self)

    def add_to(self, name: str, *values: Any) -> None:
        """Append to a collection slot.

        Reference sets hold one entry per entity: adding another version of a
        member replaces the old reference in place.
        """
        slot_type = self._ctx.registry.slot_type(self.schema, name)
        if not isinstance(slot_type, SetOf):
            raise TypeError(f"slot {name} is not a collection")
        current = list(self._slots[name])
        for value in _unwrap_handles(list(values)):
            if slot_type.holds_references and isinstance(value, VersionedId):
                same = [i for i, v in enumerate(current) if v.nominative == value.nominative]
                if same:
                    current[same[0]] = value
                    continue
            current.append(value)
        self.write_slot(name, current)

    def slot_originator(self, name: str) -> str:
        return self.slot_originators[name]

    def last_version(self) -> EntityHandle:
        return self._ctx.read_entity(self.nominative)

    def state(self) -> dict:
        self._ctx._require_active()
        return copy.deepcopy(self._slots)

    __getitem__ = read_slot
    __setitem__ = write_slot


def _unwrap_handles(value: Any) -> Any:
    if isinstance(value, EntityHandle):
        return value.ref()
    if isinstance(value, list):
        return [_unwrap_handles(v) for v in value]
    if isinstance(value, tuple):
        return [_unwrap_handles(v) for v in value]
    return value


class _PendingView(ReadOnlyStoreView):
    """Store view that also answers for entities this transaction is writing."""

    def __init__(self, store: MemoryStore, pending: dict[NominativeId, tuple[int, str, dict]]):
        super().__init__(store)
        self._pending = pending

    def _hit(self, vid: VersionedId):
        entry = self._pending.get(vid.nominative)
        return entry if entry is not None and entry[0] == vid.version else None

    def exists(self, vid: VersionedId) -> bool:
        return self._hit(vid) is not None or super().exists(vid)

    def schema_of(self, vid: VersionedId) -> str | None:
        hit = self._hit(vid)
        return hit[1] if hit else super().schema_of(vid)

    def slots_of(self, vid: VersionedId) -> dict:
        hit = self._hit(vid)
        return hit[2] if hit else super().slots_of(vid)

    def head_version(self, nominative: NominativeId) -> int | None:
        version = super().head_version(nominative)
        if version is None and nominative in self._pending:
            return self._pending[nominative][0]
        return version


class TransactionContext:
    """Unit of isolation for one role. Never share it across threads."""

    def __init__(
        self,
        store: MemoryStore,
        role: ConcreteRole,
        mode: Mode | str | None = None,
        permission_token: str | None = None,
    ):
        if not isinstance(role, ConcreteRole):
            raise UnknownRole(f"a ConcreteRole is required, got {role!r}")
        if role.backing is not None and role.backing not in store:
            raise UnknownRole(f"role {role} is not backed by a stored entity")
        self.store = store
        self.registry = store.registry
        self.role = role
        self.mode = Mode(mode) if mode is not None else store.mode
        self.permission_token = (
            permission_token if permission_token is not None else default_permission_token(role)
        )
        self.snapshot: dict[NominativeId, int] = store.heads()
        self.handles: dict[NominativeId, EntityHandle] = {}
        self.dirty: dict[NominativeId, None] = {}  # insertion-ordered set
        self.state = ACTIVE
        self._historic: dict[VersionedId, EntityHandle] = {}
        self._reads: dict[NominativeId, int] = {}

    # -- lifecycle -----------------------------------------------------------

    def _require_active(self) -> None:
        if self.state != ACTIVE:
            raise InactiveContext(f"transaction is {self.state}")

    def commit(self):
        self._require_active()
        raise CommitSignal(self)

    def abort(self):
        self._require_active()
        raise AbortSignal(self)

    def rollback(self, error: BaseException | None = None, value: Any = None) -> Outcome:
        """Discard everything this transaction touched."""
        self._require_active()
        self.state = ABORTED
        return Outcome("aborted", error=error, value=value)

    # -- reads ---------------------------------------------------------------

    def _materialize(self, rec: StoredRecord, base_version: int | None, read_only: bool) -> EntityHandle:
        if rec.is_conflict_set:
            raise ResolveConflictFirst(f"{rec.id} is a conflict set of {[str(v) for v in conflict_versions(rec.payload)]}")
        schema = self.registry.get(rec.schema_name)
        slots = self.registry.deserialize_entity(schema, rec.slots)
        originators = {name: rec.origin.role for name in slots}
        originators.update(rec.payload.get("originators", {}))
        return EntityHandle(
            self, rec.id.nominative, schema, slots, originators, base_version,
            status=rec.status, read_only=read_only, version=rec.id.version,
        )

    def read_entity(self, nominative: NominativeId | str) -> EntityHandle:
        """Handle on the snapshot's version of ``nominative``; cached per transaction."""
        self._require_active()
        n = NominativeId.of(nominative)
        handle = self.handles.get(n)
        if handle is not None:
            return handle
        version = self.snapshot.get(n)
        if version is None:
            raise NotFound(f"no object named {n} in this snapshot")
        rec = self.store.get_record(VersionedId(n, version))
        handle = self._materialize(rec, version, read_only=False)
        self.handles[n] = handle
        self._reads[n] = version
        return handle

    def resolve_reference(self, ref: VersionedId | Reference | str) -> EntityHandle:
        """Handle on exactly the referenced version.

        The snapshot's own version comes back as the ordinary writable handle;
        older versions come back read-only (use ``last_version()`` to move on).
        """
        self._require_active()
        vid = VersionedId.of(ref)
        n = vid.nominative
        handle = self.handles.get(n)
        if handle is not None and handle.ref() == vid:
            return handle
        version = self.snapshot.get(n)
        if version is None or vid.version > version:
            raise NotFound(f"{vid} is not visible in this snapshot")
        if vid.version == version:
            return self.read_entity(n)
        handle = self._historic.get(vid)
        if handle is None:
            handle = self._materialize(self.store.get_record(vid), vid.version, read_only=True)
            self._historic[vid] = handle
        return handle

    def exists(self, nominative: NominativeId | str) -> bool:
        n = NominativeId.of(nominative)
        return n in self.handles or n in self.snapshot

    def read_conflict_set(self, nominative: NominativeId | str) -> list[VersionedId]:
        """Contending versions if the snapshot head of ``nominative`` is a conflict set, else []."""
        self._require_active()
        n = NominativeId.of(nominative)
        version = self.snapshot.get(n)
        if version is None:
            raise NotFound(f"no object named {n} in this snapshot")
        rec = self.store.get_record(VersionedId(n, version))
        self._reads[n] = version
        return conflict_versions(rec.payload) if rec.is_conflict_set else []

    def resolve_conflict(self, nominative: NominativeId | str, start_from: VersionedId) -> EntityHandle:
        """Writable handle that will replace a conflict-set head.

        Slots start as a copy of ``start_from`` (one of the contenders); the
        caller merges in whatever it needs and commits.
        """
        n = NominativeId.of(nominative)
        contenders = self.read_conflict_set(n)
        if not contenders:
            raise ValueError(f"{n} has no conflict to resolve")
        if start_from not in contenders:
            raise ValueError(f"{start_from} is not one of {[str(v) for v in contenders]}")
        rec = self.store.get_record(start_from)
        base = self.snapshot[n]
        handle = self._materialize(rec, base, read_only=False)
        handle.version = base
        handle.status = VALID
        self.handles[n] = handle
        self._mark_dirty(handle)
        return handle

    # -- writes --------------------------------------------------------------

    def create_entity(self, schema: EntitySchema | str, nominative: NominativeId | str) -> EntityHandle:
        self._require_active()
        schema = self.registry.get(schema)
        n = NominativeId.of(nominative)
        if n in self.snapshot or n in self.handles:
            raise AlreadyExists(f"{n} already exists")
        slots = self.registry.default_state(schema)
        originators = {name: self.role.role_id for name in slots}
        handle = EntityHandle(self, n, schema, slots, originators, None)
        self.handles[n] = handle
        self._mark_dirty(handle)
        return handle

    def get_or_create(self, schema: EntitySchema | str, nominative: NominativeId | str) -> EntityHandle:
        n = NominativeId.of(nominative)
        if self.exists(n):
            return self.read_entity(n)
        return self.create_entity(schema, n)

    def _mark_dirty(self, handle: EntityHandle) -> None:
        self.dirty[handle.nominative] = None

    def _placeholder(self, handle: EntityHandle) -> int:
        return handle.base_version if handle.base_version is not None else 1

    # -- commit protocol -------------------------------------------------------

    def try_commit(self) -> Outcome:
        """Run the commit protocol and close the transaction."""
        self._require_active()
        dirty = [self.handles[n] for n in self.dirty]
        if not dirty:
            self.state = COMMITTED
            return Outcome("committed")

        pending: dict[NominativeId, tuple[int, str, dict]] = {}
        for h in dirty:
            slots_doc = self.registry.serialize_entity(h.schema, h._slots)
            pending[h.nominative] = (self._placeholder(h), h.schema.name, slots_doc)
        view = _PendingView(self.store, pending)

        structural: list[Violation] = []
        domain: list[Violation] = []
        for h in dirty:
            slots_doc = pending[h.nominative][2]
            found = self.registry.typecheck(h.schema, slots_doc, view).violations
            structural += [Violation(f"{h.nominative}.{v.path}", v.message) for v in found]
            if not found:
                found = self.registry.check_domain_constraints(h.schema, slots_doc, view).violations
                domain += [Violation(f"{h.nominative}:{v.path}", v.message) for v in found]
        if structural or domain:
            self.state = ABORTED
            cls = TypecheckFailed if structural else IntegrityRejected
            err = cls("integrity check failed: " + "; ".join(map(str, structural + domain)), structural + domain)
            return Outcome("rejected", error=err)

        writes = []
        for h in dirty:
            slots_doc = pending[h.nominative][2]
            originators = dict(h.slot_originators)
            writes.append(PendingWrite(h.nominative, h.base_version, _rebinder(h.schema.name, slots_doc, originators, pending)))

        reads = {}
        if self.mode is Mode.ACID and self.store.serializable:
            reads = {n: v for n, v in self._reads.items() if n not in self.dirty}
        try:
            result = commit_writes(self.store, self.role, self.permission_token, writes, reads, self.mode)
        except Conflicted as exc:
            self.state = ABORTED
            return Outcome("conflicted", error=exc)
        self.state = COMMITTED
        return Outcome(
            "committed",
            written=result.written,
            conflict_sets=result.conflict_sets,
            transaction_id=result.transaction_id,
            timestamp=result.timestamp,
        )


def _rebinder(schema_name: str, slots_doc: dict, originators: dict, pending: dict) -> Callable[[dict], dict]:
    """Build the payload once final versions are known.

    References to objects written by the same transaction are re-pointed to the
    versions that transaction produces.
    """

    def build(final: dict[NominativeId, int]) -> dict:
        def rebind(doc):
            if isinstance(doc, Reference):
                vid = VersionedId.of(doc)
                entry = pending.get(vid.nominative)
                if entry is not None and entry[0] == vid.version and vid.nominative in final:
                    return VersionedId(vid.nominative, final[vid.nominative]).ref()
                return doc
            if isinstance(doc, list):
                return [rebind(x) for x in doc]
            if isinstance(doc, dict):
                return {k: rebind(v) for k, v in doc.items()}
            return doc

        return entity_payload(schema_name, rebind(slots_doc), originators)

    return build


@dataclass
class PendingWrite:
    nominative: NominativeId
    base_version: int | None
    payload: dict | Callable[[dict], dict]
    status: Status = VALID


@dataclass
class CommitResult:
    written: list[VersionedId]
    conflict_sets: list[VersionedId]
    transaction_id: int
    timestamp: Timestamp


def commit_writes(
    store: MemoryStore,
    role: ConcreteRole,
    permission_token: str,
    writes: Iterable[PendingWrite],
    reads: dict[NominativeId, int] | None = None,
    mode: Mode = Mode.ACID,
) -> CommitResult:
    """Append one transaction's records and move heads, all inside the commit lock.

    ACID: any write whose head moved since the snapshot, or any validated read
    that went stale, raises :class:`Conflicted` and nothing is written.
    BASE: a write whose head moved is kept as a non-head version and the head
    becomes a conflict set holding both contenders.
    """
    writes = list(writes)
    reads = reads or {}
    with store.commit_lock:
        stale = sorted(str(n) for n, v in reads.items() if store.head_version(n) != v)
        clashes = [w for w in writes if store.head_version(w.nominative) != w.base_version]
        if mode is Mode.ACID and (stale or clashes):
            names = [str(w.nominative) for w in clashes] + stale
            raise Conflicted(f"concurrent commit touched {', '.join(names)}", names)

        current = {w.nominative: store.head_version(w.nominative) for w in writes}
        final = {n: (cur or 0) + 1 for n, cur in current.items()}
        txid = store.next_transaction_id()
        ts = store.clock()
        origin = Origin(txid, role.role_id, ts, permission_token)

        records = []
        for w in writes:
            payload = w.payload(final) if callable(w.payload) else w.payload
            prev = VersionedId(w.nominative, w.base_version) if w.base_version else None
            vid = VersionedId(w.nominative, final[w.nominative])
            records.append(StoredRecord.create(vid, payload, origin, prev, w.status))

        clashed = {id(w) for w in clashes}
        clean = [r for r, w in zip(records, writes) if id(w) not in clashed]
        store.put_records(clean)
        for rec in clean:
            if not store.advance_head(rec.id.nominative, current[rec.id.nominative], rec.id.version):
                raise RuntimeError(f"head of {rec.id.nominative} moved inside the commit lock")
        conflict_sets = []
        for rec, w in zip(records, writes):
            if id(w) in clashed:
                conflict_sets.append(build_conflict_set(store, w.nominative, current[w.nominative], rec))
        return CommitResult([r.id for r in records], conflict_sets, txid, ts)


def build_conflict_set(store: MemoryStore, nominative: NominativeId, head_version: int, losing: StoredRecord) -> VersionedId:
    """Keep ``losing`` as a non-head version and make the head a set of the contenders.

    If the current head is already a conflict set its members are carried over,
    so building is order-independent: the same contenders always give the same
    payload.
    """
    with store.commit_lock:
        head_vid = VersionedId(nominative, head_version)
        head_rec = store.get_record(head_vid)
        contenders = set(conflict_versions(head_rec.payload)) if head_rec.is_conflict_set else {head_vid}
        contenders.add(losing.id)
        if losing.id not in store:
            store.put_record(losing)
        version = max(head_version, losing.id.version) + 1
        cset = StoredRecord.create(
            VersionedId(nominative, version), conflict_set_payload(contenders), losing.origin, head_vid
        )
        store.put_record(cset)
        if not store.advance_head(nominative, head_version, version):
            raise Conflicted(f"head of {nominative} moved while building a conflict set", [str(nominative)])
        return cset.id


def with_role_do_transaction(
    store: MemoryStore,
    role: ConcreteRole,
    body: Callable[[TransactionContext], Any],
    *,
    mode: Mode | str | None = None,
    permission_token: str | None = None,
) -> Outcome:
    """Run ``body`` in a fresh transaction acting as ``role``.

    Errors raised by the body are returned in an aborted Outcome (and logged),
    not propagated; call ``raise_for_status()`` to re-raise.
    """
    ctx = TransactionContext(store, role, mode, permission_token)
    token = _current.set(ctx)
    try:
        value = body(ctx)
    except CommitSignal as sig:
        if sig.context is not ctx:
            raise
        return ctx.try_commit()
    except AbortSignal as sig:
        if sig.context is not ctx:
            raise
        return ctx.rollback()
    except Exception as exc:
        log.debug("transaction body for %s failed: %r", role, exc)
        return ctx.rollback(error=exc)
    else:
        return ctx.rollback(value=value)
    finally:
        _current.reset(token)


def begin(store: MemoryStore, role: ConcreteRole, **kwargs) -> TransactionContext:
    """Open a context to drive by hand: finish with ``try_commit()`` or ``rollback()``."""
    return TransactionContext(store, role, **kwargs)


def origin_of(store: MemoryStore, vid: VersionedId | str) -> Origin:
    return store.get_record(VersionedId.of(vid)).origin

