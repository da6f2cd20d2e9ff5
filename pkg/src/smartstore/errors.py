"""Exception hierarchy shared by the store, schema and transaction layers."""


class SmartStoreError(Exception):
    pass


# object store

class NotFound(SmartStoreError, LookupError):
    pass


class KeyAlreadyExists(SmartStoreError):
    """An append would overwrite an existing versioned key."""


class DanglingPrevious(SmartStoreError):
    pass


class HashMismatch(SmartStoreError):
    pass


class MissingRecord(SmartStoreError):
    pass


class BrokenChain(SmartStoreError):
    pass


class StoreReadOnly(SmartStoreError):
    pass


class CorruptLog(SmartStoreError):
    """Log replay hit a bad frame; everything before ``offset`` was loaded."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt log at byte offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


# schema model

class SchemaError(SmartStoreError):
    pass


class DuplicateSchemaName(SchemaError):
    pass


class UnknownParent(SchemaError):
    pass


class DuplicateSlot(SchemaError):
    pass


class InheritanceCycle(SchemaError):
    pass


class UnknownSchema(SchemaError, LookupError):
    pass


class TypeMismatch(SchemaError, TypeError):
    pass


class UnknownSlot(SchemaError, KeyError):
    pass


class SchemaNotRole(SchemaError):
    pass


# transactions

class TransactionError(SmartStoreError):
    pass


class InactiveContext(TransactionError):
    pass


class AlreadyExists(TransactionError):
    pass


class UnknownRole(TransactionError):
    pass


class ResolveConflictFirst(TransactionError):
    """The object's head is a conflict set; it must be resolved before typed access."""


class ReadOnlyHandle(TransactionError):
    pass


class Conflicted(TransactionError):
    def __init__(self, message: str, nominatives=()):
        super().__init__(message)
        self.nominatives = tuple(nominatives)


class IntegrityRejected(TransactionError):
    def __init__(self, message: str, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class TypecheckFailed(IntegrityRejected):
    pass


# integrity and revocation

class AlreadyInvalid(SmartStoreError):
    pass


class UnknownStrategy(SmartStoreError, ValueError):
    pass
