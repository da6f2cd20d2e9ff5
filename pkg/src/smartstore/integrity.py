"""Integrity verification, revocation as invalidation, and cascading revalidation.

A stored object is sound when three checks hold at once: its payload is
well-typed for its schema (structural), every domain predicate of the schema
holds (domain), and its bytes still match their content hash (bit-level).
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import codec
from .codec import Reference
from .errors import AlreadyInvalid, NotFound, UnknownStrategy
from .records import (
    CONFLICT_SET,
    ENTITY,
    NominativeId,
    Status,
    StoredRecord,
    VALID,
    VersionedId,
    conflict_versions,
    entity_payload,
)
from .schema import ConcreteRole
from .store import MemoryStore, Mode, ReadOnlyStoreView
from .transaction import PendingWrite, commit_writes, default_permission_token

STRUCTURAL = "structural"
DOMAIN = "domain"
BIT_LEVEL = "bit-level"
CATEGORIES = (STRUCTURAL, DOMAIN, BIT_LEVEL)

STRATEGIES = ("lazy", "steady-state", "force")
IMPLEMENTED_STRATEGIES = ("lazy",)


@dataclass(frozen=True)
class IntegrityViolation:
    id: VersionedId | NominativeId
    category: str
    detail: str

    def __str__(self) -> str:
        return f"[{self.category}] {self.id}: {self.detail}"


@dataclass
class IntegrityReport:
    checked: int = 0
    violations: list[IntegrityViolation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def in_category(self, category: str) -> list[IntegrityViolation]:
        return [v for v in self.violations if v.category == category]

    def summary(self) -> str:
        counts = ", ".join(f"{c}={len(self.in_category(c))}" for c in CATEGORIES)
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}: checked {self.checked} objects ({counts})"


def _check_record(store: MemoryStore, rec: StoredRecord, view: ReadOnlyStoreView) -> list[IntegrityViolation]:
    vid = rec.id
    if vid in store.damaged or not rec.verify():
        # payload bytes are untrustworthy; the other checks would only add noise
        return [IntegrityViolation(vid, BIT_LEVEL, "content hash does not match stored record")]

    registry = store.registry
    payload = rec.payload
    if not isinstance(payload, dict):
        return [IntegrityViolation(vid, STRUCTURAL, "payload is not a Map")]
    kind = payload.get("kind")
    if kind == CONFLICT_SET:
        found = []
        try:
            members = conflict_versions(payload)
        except (TypeError, ValueError) as exc:
            return [IntegrityViolation(vid, STRUCTURAL, f"malformed conflict set: {exc}")]
        for m in members:
            if m.nominative != vid.nominative or m not in store:
                found.append(IntegrityViolation(vid, STRUCTURAL, f"conflict set member {m} is not a stored version of {vid.nominative}"))
        return found
    if kind != ENTITY:
        return [IntegrityViolation(vid, STRUCTURAL, f"unknown record kind {kind!r}")]
    schema = payload.get("schema")
    if schema not in registry:
        return [IntegrityViolation(vid, STRUCTURAL, f"unknown schema {schema!r}")]
    slots = payload.get("slots")
    result = registry.typecheck(schema, slots, view)
    if not result.ok:
        return [IntegrityViolation(vid, STRUCTURAL, str(v)) for v in result.violations]
    originators = payload.get("originators")
    if not isinstance(originators, dict) or set(originators) != set(slots) or not all(
        isinstance(r, str) and r for r in originators.values()
    ):
        return [IntegrityViolation(vid, STRUCTURAL, "slot originators do not cover the slots")]
    result = registry.check_domain_constraints(schema, slots, view)
    return [IntegrityViolation(vid, DOMAIN, str(v)) for v in result.violations]


def verify_integrity(store: MemoryStore, subset: Iterable[NominativeId | str] | None = None) -> IntegrityReport:
    """Check the head record of every object in ``subset`` (default: all objects).

    Versions quarantined as damaged when the log was loaded are reported as
    bit-level violations even when they are no longer the head.
    """
    heads = store.heads()
    names = sorted(heads) if subset is None else sorted({NominativeId.of(n) for n in subset})
    view = ReadOnlyStoreView(store)
    report = IntegrityReport()
    for n in names:
        report.checked += 1
        version = heads.get(n)
        if version is None:
            report.violations.append(IntegrityViolation(n, STRUCTURAL, "no such object"))
            continue
        head = VersionedId(n, version)
        report.violations += _check_record(store, store.get_record(head), view)
        # damaged history is unreadable too, even when the head is intact
        for vid in sorted(store.damaged, key=lambda v: v.version):
            if vid.nominative == n and vid != head:
                report.violations.append(IntegrityViolation(vid, BIT_LEVEL, "damaged historical version"))
    return report


def dependents_of(store: MemoryStore, nominative: NominativeId | str) -> set[NominativeId]:
    """Objects whose head references any version of ``nominative`` (from the index)."""
    return store.dependents(NominativeId.of(nominative))


def scan_dependents(store: MemoryStore, nominative: NominativeId | str) -> set[NominativeId]:
    """Same answer as :func:`dependents_of`, by scanning every head payload."""
    target = NominativeId.of(nominative)
    found = set()
    for n, version in store.heads().items():
        if n == target:
            continue
        rec = store.get_record(VersionedId(n, version))
        payloads = [rec.payload]
        if rec.is_conflict_set:
            payloads = [store.get_record(v).payload for v in conflict_versions(rec.payload)]
        for p in payloads:
            if any(VersionedId.of(r).nominative == target for r in codec.references_in(p.get("slots", {}))):
                found.add(n)
    return found


def revoke(
    store: MemoryStore,
    role: ConcreteRole,
    vid: VersionedId | str,
    reason: str,
    *,
    permission_token: str | None = None,
) -> VersionedId:
    """Mark ``vid`` invalid by appending an invalidating version; nothing is removed."""
    vid = VersionedId.of(vid)
    rec = store.get_record(vid)
    token = permission_token if permission_token is not None else default_permission_token(role)
    with store.commit_lock:
        if not rec.status.valid:
            raise AlreadyInvalid(f"{vid} is itself an invalid version")
        for later in store.history(vid.nominative):
            if later.id.version > vid.version and later.status.revoked == vid:
                raise AlreadyInvalid(f"{vid} was already revoked by {later.id}")
        head = store.head(vid.nominative)
        write = PendingWrite(vid.nominative, head.version, rec.payload, Status.invalid(reason, revoked=vid))
        result = commit_writes(store, role, token, [write], mode=Mode.ACID)
    return result.written[0]


@dataclass
class RevalidationOutcome:
    order: list[NominativeId] = field(default_factory=list)
    invalidated: set[NominativeId] = field(default_factory=set)
    repaired: set[NominativeId] = field(default_factory=set)
    unresolved: set[NominativeId] = field(default_factory=set)
    rounds_used: int = 0
    cyclic: bool = False
    written: list[VersionedId] = field(default_factory=list)


RepairPolicy = Callable[[StoredRecord, dict], "dict | None"]


def repoint_references(rec: StoredRecord, fixes: dict[VersionedId, VersionedId]) -> dict | None:
    """Default repair: re-point each stale reference at the dependee's valid head."""

    def rewrite(doc):
        if isinstance(doc, Reference):
            vid = VersionedId.of(doc)
            return fixes[vid].ref() if vid in fixes else doc
        if isinstance(doc, list):
            return [rewrite(x) for x in doc]
        if isinstance(doc, dict):
            return {k: rewrite(v) for k, v in doc.items()}
        return doc

    return rewrite(rec.slots)


UNCHANGED, REPAIRED, INVALIDATED = "unchanged", "repaired", "invalidated"


class _Cascade:
    def __init__(self, store, role, affected, reason, repair, token):
        self.store = store
        self.role = role
        self.affected = affected
        self.reason = reason
        self.repair = repair
        self.token = token
        self.view = ReadOnlyStoreView(store)
        self.written: list[VersionedId] = []

    def _usable(self, rec: StoredRecord) -> bool:
        return rec.status.valid and not rec.is_conflict_set

    def process(self, n: NominativeId) -> str:
        store = self.store
        rec = store.head_record(n)
        if rec.is_conflict_set:
            return UNCHANGED
        fixes: dict[VersionedId, VersionedId] = {}
        broken: list[VersionedId] = []
        for ref in codec.references_in(rec.slots):
            vid = VersionedId.of(ref)
            if vid.nominative == n or vid.nominative not in self.affected:
                continue
            dependee = store.head_record(vid.nominative)
            if not self._usable(dependee):
                broken.append(vid)
            elif vid != dependee.id:
                fixes[vid] = dependee.id
        if not fixes and not broken:
            return UNCHANGED

        if not broken:
            slots = self.repair(rec, fixes)
            if slots is not None:
                registry = store.registry
                ok = registry.typecheck(rec.schema_name, slots, self.view).ok and registry.check_domain_constraints(
                    rec.schema_name, slots, self.view
                ).ok
                if ok:
                    payload = entity_payload(rec.schema_name, slots, dict(rec.payload.get("originators", {})))
                    self._write(rec, payload, VALID)
                    return REPAIRED
            detail = "repair rejected by integrity checks"
        else:
            detail = "depends on invalid " + ", ".join(sorted(str(v) for v in set(broken)))
        if not rec.status.valid:
            return UNCHANGED
        self._write(rec, rec.payload, Status.invalid(f"{self.reason}: {detail}", revoked=rec.id))
        return INVALIDATED

    def _write(self, rec: StoredRecord, payload: dict, status: Status) -> None:
        write = PendingWrite(rec.id.nominative, rec.id.version, payload, status)
        result = commit_writes(self.store, self.role, self.token, [write], mode=Mode.ACID)
        self.written += result.written


def _affected(store: MemoryStore, seeds: list[NominativeId]) -> set[NominativeId]:
    seen = set(seeds)
    frontier = list(seeds)
    while frontier:
        n = frontier.pop()
        for d in store.dependents(n):
            if d not in seen:
                seen.add(d)
                frontier.append(d)
    return seen


def cascade_revalidate(
    store: MemoryStore,
    role: ConcreteRole,
    seeds: Iterable[NominativeId | str],
    strategy: str = "lazy",
    max_rounds: int = 3,
    *,
    reason: str = "cascade",
    repair: RepairPolicy | None = None,
    permission_token: str | None = None,
) -> RevalidationOutcome:
    """Propagate a change (typically a revocation) from ``seeds`` to everything that depends on it.

    Acyclic affected graphs get one pass in topological order, dependees first.
    Cyclic ones are walked one breadth-first frontier per round, for at most
    ``max_rounds`` rounds; whatever is still moving then is reported unresolved.
    Every change is its own committed transaction originated by ``role``.
    """
    if strategy not in STRATEGIES:
        raise UnknownStrategy(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy not in IMPLEMENTED_STRATEGIES:
        raise NotImplementedError(f"strategy {strategy!r} is reserved but not implemented")
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    seeds = sorted({NominativeId.of(s) for s in seeds})
    for s in seeds:
        if store.head_version(s) is None:
            raise NotFound(f"no object named {s}")

    affected = _affected(store, seeds)
    token = permission_token if permission_token is not None else default_permission_token(role)
    cascade = _Cascade(store, role, affected, reason, repair or repoint_references, token)
    outcome = RevalidationOutcome()
    last: dict[NominativeId, str] = {}

    graph = {n: store.dependencies(n) & affected for n in affected}
    sorter = graphlib.TopologicalSorter(graph)
    try:
        sorter.prepare()
    except graphlib.CycleError:
        outcome.cyclic = True
    if not outcome.cyclic:
        outcome.rounds_used = 1
        seed_set = set(seeds)
        while sorter.is_active():
            ready = sorted(sorter.get_ready())
            for n in ready:
                outcome.order.append(n)
                if n not in seed_set:
                    action = cascade.process(n)
                    if action != UNCHANGED:
                        last[n] = action
                sorter.done(n)
    else:
        frontier = set(seeds)
        outcome.order += seeds
        while frontier and outcome.rounds_used < max_rounds:
            outcome.rounds_used += 1
            candidates = sorted({d for f in frontier for d in store.dependents(f) if d in affected})
            moved = set()
            for d in candidates:
                outcome.order.append(d)
                action = cascade.process(d)
                if action != UNCHANGED:
                    last[d] = action
                    moved.add(d)
            frontier = moved
        if frontier:
            pending = {d for f in frontier for d in store.dependents(f) if d in affected}
            outcome.unresolved = frontier | pending

    for n, action in last.items():
        if n in outcome.unresolved:
            continue
        (outcome.repaired if action == REPAIRED else outcome.invalidated).add(n)
    outcome.written = cascade.written
    return outcome
