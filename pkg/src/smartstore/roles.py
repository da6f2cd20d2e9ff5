"""Creating and looking up concrete roles backed by role-entities."""

from __future__ import annotations

from .errors import SchemaNotRole, UnknownSchema
from .records import NominativeId
from .schema import ConcreteRole, EntitySchema
from .store import MemoryStore
from .transaction import with_role_do_transaction


def role_of(store: MemoryStore, nominative: NominativeId | str) -> ConcreteRole:
    """Concrete role backed by the current head of an existing role-entity."""
    n = NominativeId.of(nominative)
    head = store.head(n)
    schema = store.get_record(head).schema_name
    if schema is None or not store.registry.is_role(schema):
        raise SchemaNotRole(f"{n} is a {schema}, not a role")
    return ConcreteRole(str(n), head)


def get_or_create_role(
    store: MemoryStore,
    acting: ConcreteRole,
    schema: EntitySchema | str,
    nominative: NominativeId | str,
    *,
    permission_token: str | None = None,
) -> ConcreteRole:
    """Return the role named ``nominative``, creating it as ``acting`` if needed."""
    registry = store.registry
    schema = registry.get(schema)
    if not registry.is_role(schema):
        raise SchemaNotRole(f"{schema.name} is not a role schema")
    n = NominativeId.of(nominative)

    if store.head_version(n) is None:
        def create(tx):
            tx.create_entity(schema, n)
            tx.commit()

        outcome = with_role_do_transaction(store, acting, create, permission_token=permission_token)
        if not outcome.committed and not outcome.conflicted:
            outcome.raise_for_status()
        # a conflict means someone else created it first; fall through and use theirs

    role = role_of(store, n)
    existing = store.get_record(role.backing).schema_name
    if not registry.is_subtype(existing, schema):
        raise UnknownSchema(f"{n} exists as a {existing}, not a {schema.name}")
    return role
