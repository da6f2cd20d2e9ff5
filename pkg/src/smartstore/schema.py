"""Atomic value types, entity schemas with typed slots, roles, and checking.

Structural consistency is checked by :meth:`SchemaRegistry.typecheck`; domain
constraints are plain predicates attached to a schema and evaluated by
:meth:`SchemaRegistry.check_domain_constraints`.
"""

from __future__ import annotations

import datetime as _dt
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Callable, Union

from .codec import Reference, Timestamp
from .errors import (
    DuplicateSchemaName,
    DuplicateSlot,
    InheritanceCycle,
    TypeMismatch,
    UnknownParent,
    UnknownSchema,
    UnknownSlot,
)
from .records import NominativeId, VersionedId


class AtomicType:
    """Marker base for slot value types."""

    name = "?"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class TextType(AtomicType):
    name = "Text"


@dataclass(frozen=True)
class FloatType(AtomicType):
    name = "Float"


@dataclass(frozen=True)
class IntegerType(AtomicType):
    name = "Integer"


@dataclass(frozen=True)
class BooleanType(AtomicType):
    name = "Boolean"


@dataclass(frozen=True)
class DateAndTimeType(AtomicType):
    name = "DateAndTime"


TEXT = TextType()
FLOAT = FloatType()
INTEGER = IntegerType()
BOOLEAN = BooleanType()
DATE_AND_TIME = DateAndTimeType()


@dataclass(frozen=True)
class CompositeType(AtomicType):
    """Aggregate value versioned as a whole (e.g. a heart-rate sample)."""

    type_name: str
    fields: tuple[tuple[str, AtomicType], ...]

    def __post_init__(self):
        fields = self.fields
        if isinstance(fields, Mapping):
            fields = tuple(fields.items())
        fields = tuple((str(k), t) for k, t in fields)
        names = [k for k, _ in fields]
        if len(set(names)) != len(names):
            raise DuplicateSlot(f"composite {self.type_name} repeats a field name")
        object.__setattr__(self, "fields", fields)

    @property
    def name(self) -> str:
        return self.type_name

    def make(self, **values) -> dict:
        return {k: values[k] for k, _ in self.fields}


def _schema_name(target) -> str:
    return target.name if isinstance(target, EntitySchema) else str(target)


@dataclass(frozen=True)
class RefTo(AtomicType):
    """Reference to one version of an entity of schema ``target`` (or a subtype)."""

    target: str

    def __post_init__(self):
        object.__setattr__(self, "target", _schema_name(self.target))

    @property
    def name(self) -> str:
        return f"RefTo({self.target})"


@dataclass(frozen=True)
class SetOf(AtomicType):
    """Collection slot.

    With a schema name as element the slot holds references to entities; with
    an atomic type it holds values of that type. Order of insertion is kept.
    """

    element: Union[str, AtomicType]

    def __post_init__(self):
        if not isinstance(self.element, AtomicType):
            object.__setattr__(self, "element", _schema_name(self.element))

    @property
    def holds_references(self) -> bool:
        return isinstance(self.element, str)

    @property
    def item_type(self) -> AtomicType:
        return RefTo(self.element) if self.holds_references else self.element

    @property
    def name(self) -> str:
        return f"SetOf({self.element})"


@dataclass(frozen=True)
class SlotDefinition:
    name: str
    value_type: AtomicType

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name or self.name.startswith("$"):
            raise ValueError(f"invalid slot name {self.name!r}")
        if not isinstance(self.value_type, AtomicType):
            raise TypeError(f"slot {self.name} needs an AtomicType, got {self.value_type!r}")


@dataclass(frozen=True)
class DomainPredicate:
    """Named, side-effect free check over an entity's slot map and a read-only store view."""

    name: str
    check: Callable[[dict, Any], bool]


@dataclass(frozen=True)
class EntitySchema:
    name: str
    slots: tuple[SlotDefinition, ...] = ()
    parent: str | None = None
    constraints: tuple[DomainPredicate, ...] = ()
    is_role: bool = False

    def __post_init__(self):
        slots = self.slots
        if isinstance(slots, Mapping):
            slots = [SlotDefinition(k, t) for k, t in slots.items()]
        object.__setattr__(self, "slots", tuple(slots))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.parent is not None:
            object.__setattr__(self, "parent", _schema_name(self.parent))


@dataclass(frozen=True)
class Violation:
    path: str | None
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}" if self.path else self.message


@dataclass
class CheckResult:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class ConcreteRole:
    """The act of exercising a role; required to start a transaction."""

    role_id: str
    backing: VersionedId | None = None

    def __post_init__(self):
        if not self.role_id:
            raise ValueError("role_id must be non-empty")

    @property
    def nominative(self) -> NominativeId | None:
        return self.backing.nominative if self.backing else None

    def __str__(self) -> str:
        return self.role_id


SUPER_USER = ConcreteRole("SuperUserAdmin")

ROLE_ENTITY = EntitySchema("RoleEntity", is_role=True)


def default_value(t: AtomicType) -> Any:
    if isinstance(t, TextType):
        return ""
    if isinstance(t, FloatType):
        return 0.0
    if isinstance(t, IntegerType):
        return 0
    if isinstance(t, BooleanType):
        return False
    if isinstance(t, DateAndTimeType):
        return Timestamp(0)
    if isinstance(t, CompositeType):
        return {k: default_value(ft) for k, ft in t.fields}
    if isinstance(t, SetOf):
        return []
    if isinstance(t, RefTo):
        return None
    raise TypeError(f"unknown slot type {t!r}")


class SchemaRegistry:
    """Code-side registry of entity schemas; written at startup, then read-only."""

    def __init__(self, include_role_entity: bool = True):
        self._schemas: dict[str, EntitySchema] = {}
        if include_role_entity:
            self.register(ROLE_ENTITY)

    def register(self, schema: EntitySchema) -> EntitySchema:
        if schema.name in self._schemas:
            raise DuplicateSchemaName(f"schema {schema.name} already registered")
        if schema.parent == schema.name:
            raise InheritanceCycle(f"schema {schema.name} cannot extend itself")
        if schema.parent is not None and schema.parent not in self._schemas:
            raise UnknownParent(f"parent {schema.parent} of {schema.name} is not registered")
        seen = set(self.effective_slots(schema.parent)) if schema.parent else set()
        for slot in schema.slots:
            if slot.name in seen:
                raise DuplicateSlot(f"slot {slot.name} of {schema.name} is already defined")
            seen.add(slot.name)
        self._schemas[schema.name] = schema
        return schema

    def get(self, schema: EntitySchema | str) -> EntitySchema:
        name = _schema_name(schema)
        try:
            return self._schemas[name]
        except KeyError:
            raise UnknownSchema(f"schema {name} is not registered") from None

    def __contains__(self, name: str) -> bool:
        return _schema_name(name) in self._schemas

    def names(self) -> list[str]:
        return list(self._schemas)

    def lineage(self, schema: EntitySchema | str) -> list[EntitySchema]:
        """Schemas from the root ancestor down to ``schema``."""
        chain = []
        current: str | None = _schema_name(schema)
        while current is not None:
            s = self.get(current)
            chain.append(s)
            current = s.parent
        return chain[::-1]

    def effective_slots(self, schema: EntitySchema | str) -> dict[str, AtomicType]:
        out: dict[str, AtomicType] = {}
        for s in self.lineage(schema):
            for slot in s.slots:
                out[slot.name] = slot.value_type
        return out

    def is_role(self, schema: EntitySchema | str) -> bool:
        return any(s.is_role for s in self.lineage(schema))

    def is_subtype(self, schema: EntitySchema | str, ancestor: EntitySchema | str) -> bool:
        target = _schema_name(ancestor)
        return any(s.name == target for s in self.lineage(schema))

    def constraints_for(self, schema: EntitySchema | str) -> list[DomainPredicate]:
        return [p for s in self.lineage(schema) for p in s.constraints]

    # -- values --------------------------------------------------------------

    def default_state(self, schema: EntitySchema | str) -> dict:
        return {name: default_value(t) for name, t in self.effective_slots(schema).items()}

    def slot_type(self, schema: EntitySchema | str, slot: str) -> AtomicType:
        slots = self.effective_slots(schema)
        if slot not in slots:
            raise UnknownSlot(f"{_schema_name(schema)} has no slot {slot!r}")
        return slots[slot]

    def normalize(self, t: AtomicType, value: Any, path: str = "value") -> Any:
        """Validate an in-memory slot value and return a private copy of it."""
        if isinstance(t, TextType):
            if isinstance(value, str):
                return value
        elif isinstance(t, FloatType):
            if isinstance(value, float) or (isinstance(value, int) and not isinstance(value, bool)):
                return float(value)
        elif isinstance(t, IntegerType):
            if isinstance(value, int) and not isinstance(value, bool):
                return value
        elif isinstance(t, BooleanType):
            if isinstance(value, bool):
                return value
        elif isinstance(t, DateAndTimeType):
            if isinstance(value, Timestamp):
                return value
            if isinstance(value, (_dt.date, _dt.datetime)):
                return Timestamp.from_datetime(value)
        elif isinstance(t, CompositeType):
            if isinstance(value, Mapping):
                names = [k for k, _ in t.fields]
                if set(value) != set(names):
                    raise TypeMismatch(f"{path}: {t.name} needs fields {names}, got {sorted(value)}")
                return {k: self.normalize(ft, value[k], f"{path}.{k}") for k, ft in t.fields}
            if hasattr(value, "to_value"):
                return self.normalize(t, value.to_value(), path)
        elif isinstance(t, RefTo):
            if value is None or isinstance(value, VersionedId):
                return value
            if isinstance(value, Reference):
                return VersionedId.of(value)
        elif isinstance(t, SetOf):
            if isinstance(value, (list, tuple)):
                item = t.item_type
                out = []
                for i, v in enumerate(value):
                    if isinstance(item, RefTo) and v is None:
                        raise TypeMismatch(f"{path}[{i}]: set elements cannot be null")
                    out.append(self.normalize(item, v, f"{path}[{i}]"))
                return out
        else:
            raise TypeError(f"unknown slot type {t!r}")
        raise TypeMismatch(f"{path}: expected {t.name}, got {type(value).__name__}")

    def _to_doc(self, t: AtomicType, value: Any) -> Any:
        if isinstance(t, RefTo):
            return value.ref() if value is not None else None
        if isinstance(t, SetOf):
            return [self._to_doc(t.item_type, v) for v in value]
        if isinstance(t, CompositeType):
            return {k: self._to_doc(ft, value[k]) for k, ft in t.fields}
        return value

    def _from_doc(self, t: AtomicType, doc: Any) -> Any:
        if isinstance(t, RefTo):
            return VersionedId.of(doc) if doc is not None else None
        if isinstance(t, SetOf):
            return [self._from_doc(t.item_type, v) for v in doc]
        if isinstance(t, CompositeType):
            return {k: self._from_doc(ft, doc[k]) for k, ft in t.fields}
        return doc

    def serialize_entity(self, schema: EntitySchema | str, state: Mapping) -> dict:
        """In-memory slot state to its document (slot Map)."""
        slots = self.effective_slots(schema)
        if set(state) != set(slots):
            missing = sorted(set(slots) - set(state))
            extra = sorted(set(state) - set(slots))
            raise TypeMismatch(f"state does not match {_schema_name(schema)}: missing {missing}, unknown {extra}")
        return {name: self._to_doc(t, self.normalize(t, state[name], name)) for name, t in slots.items()}

    def deserialize_entity(self, schema: EntitySchema | str, payload: Any) -> dict:
        result = self.typecheck(schema, payload)
        if not result.ok:
            raise TypeMismatch("; ".join(str(v) for v in result.violations))
        return {name: self._from_doc(t, payload[name]) for name, t in self.effective_slots(schema).items()}

    # -- structural consistency ----------------------------------------------

    def typecheck(self, schema: EntitySchema | str, payload: Any, view: Any = None) -> CheckResult:
        """Check a slot Map against the schema, collecting every violation.

        With a ``view`` the targets of references are also checked for
        existence and schema.
        """
        result = CheckResult()
        if not isinstance(payload, Mapping):
            result.violations.append(Violation(None, f"payload must be a Map, got {type(payload).__name__}"))
            return result
        slots = self.effective_slots(schema)
        for name in slots:
            if name not in payload:
                result.violations.append(Violation(name, "missing slot"))
        for name in payload:
            if name not in slots:
                result.violations.append(Violation(str(name), "unknown slot"))
        for name, t in slots.items():
            if name in payload:
                self._check_doc(t, payload[name], name, view, result.violations)
        return result

    def _check_doc(self, t: AtomicType, doc: Any, path: str, view: Any, out: list[Violation]) -> None:
        def bad(expected: str) -> None:
            out.append(Violation(path, f"expected {expected}, got {_doc_type(doc)}"))

        if isinstance(t, TextType):
            if not isinstance(doc, str):
                bad("Text")
        elif isinstance(t, FloatType):
            if not isinstance(doc, float):
                bad("Float")
        elif isinstance(t, IntegerType):
            if isinstance(doc, bool) or not isinstance(doc, int):
                bad("Integer")
        elif isinstance(t, BooleanType):
            if not isinstance(doc, bool):
                bad("Boolean")
        elif isinstance(t, DateAndTimeType):
            if not isinstance(doc, Timestamp):
                bad("Timestamp")
        elif isinstance(t, CompositeType):
            if not isinstance(doc, Mapping):
                bad(t.name)
                return
            names = [k for k, _ in t.fields]
            for k in names:
                if k not in doc:
                    out.append(Violation(f"{path}.{k}", "missing field"))
            for k in doc:
                if k not in names:
                    out.append(Violation(f"{path}.{k}", "unknown field"))
            for k, ft in t.fields:
                if k in doc:
                    self._check_doc(ft, doc[k], f"{path}.{k}", view, out)
        elif isinstance(t, RefTo):
            if doc is None:
                return
            if not isinstance(doc, Reference):
                bad(f"Reference to {t.target}")
                return
            try:
                vid = VersionedId.of(doc)
            except ValueError:
                out.append(Violation(path, f"malformed reference {doc.target!r}"))
                return
            if view is not None:
                if not view.exists(vid):
                    out.append(Violation(path, f"reference to missing {vid}"))
                    return
                target_schema = view.schema_of(vid)
                if target_schema is not None and (
                    target_schema not in self or not self.is_subtype(target_schema, t.target)
                ):
                    out.append(Violation(path, f"{vid} is a {target_schema}, not a {t.target}"))
        elif isinstance(t, SetOf):
            if not isinstance(doc, (list, tuple)):
                bad(t.name)
                return
            item = t.item_type
            for i, v in enumerate(doc):
                if isinstance(item, RefTo) and v is None:
                    out.append(Violation(f"{path}[{i}]", "set elements cannot be null"))
                    continue
                self._check_doc(item, v, f"{path}[{i}]", view, out)
        else:
            out.append(Violation(path, f"unknown slot type {t!r}"))

    # -- domain constraints ----------------------------------------------------

    def check_domain_constraints(self, schema: EntitySchema | str, payload: Any, view: Any) -> CheckResult:
        result = CheckResult()
        for predicate in self.constraints_for(schema):
            try:
                ok = bool(predicate.check(payload, view))
            except Exception as exc:  # a crashing predicate is a failing predicate
                result.violations.append(Violation(predicate.name, f"predicate crashed: {exc!r}"))
                continue
            if not ok:
                result.violations.append(Violation(predicate.name, "constraint violated"))
        return result


def _doc_type(doc: Any) -> str:
    if doc is None:
        return "Null"
    if isinstance(doc, bool):
        return "Boolean"
    if isinstance(doc, int):
        return "Integer"
    if isinstance(doc, float):
        return "Float"
    if isinstance(doc, str):
        return "Text"
    if isinstance(doc, Timestamp):
        return "Timestamp"
    if isinstance(doc, Reference):
        return "Reference"
    if isinstance(doc, (list, tuple)):
        return "Array"
    if isinstance(doc, Mapping):
        return "Map"
    return type(doc).__name__


def tree_shaped(slot: str, name: str | None = None) -> DomainPredicate:
    """Predicate: following ``slot`` references from an entity never revisits a node.

    Walks head versions of referenced objects through the store view, so it
    rejects payloads that would hang a cyclic graph where a tree is required.
    """

    def check(payload: dict, view) -> bool:
        def targets(slots: dict) -> list[NominativeId]:
            value = slots.get(slot)
            refs = value if isinstance(value, list) else [value]
            return [VersionedId.of(r).nominative for r in refs if r is not None]

        seen: set[NominativeId] = set()
        stack = [(n, frozenset()) for n in targets(payload)]
        while stack:
            node, ancestors = stack.pop()
            if node in ancestors:
                return False
            if node in seen:
                # reachable twice is a DAG, not a tree
                return False
            seen.add(node)
            version = view.head_version(node)
            if version is None:
                continue
            child_slots = view.slots_of(VersionedId(node, version))
            stack.extend((c, ancestors | {node}) for c in targets(child_slots))
        return True

    return DomainPredicate(name or f"tree-shaped:{slot}", check)

