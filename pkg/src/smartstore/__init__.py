"""Append-only object store with origin tracing, integrity checks and revocation."""

from .codec import Reference, Timestamp, content_hash, decode, encode_canonical
from .errors import (
    AlreadyInvalid,
    Conflicted,
    CorruptLog,
    IntegrityRejected,
    NotFound,
    ResolveConflictFirst,
    SmartStoreError,
    TypecheckFailed,
)
from .integrity import (
    IntegrityReport,
    RevalidationOutcome,
    cascade_revalidate,
    dependents_of,
    revoke,
    verify_integrity,
)
from .records import NominativeId, Origin, Status, StoredRecord, VersionedId
from .roles import get_or_create_role, role_of
from .schema import (
    BOOLEAN,
    DATE_AND_TIME,
    FLOAT,
    INTEGER,
    ROLE_ENTITY,
    SUPER_USER,
    TEXT,
    CompositeType,
    ConcreteRole,
    DomainPredicate,
    EntitySchema,
    RefTo,
    SchemaRegistry,
    SetOf,
)
from .store import BackendConfig, FileStore, MemoryStore, Mode, Store, open_backend
from .transaction import (
    Outcome,
    TransactionContext,
    begin,
    current_transaction,
    origin_of,
    with_role_do_transaction,
)

__all__ = [name for name in dir() if not name.startswith("_")]
