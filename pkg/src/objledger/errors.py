"""Exception hierarchy for the ledger and the execution engine.

Two families matter to callers:

* ``TransactionRejected`` - raised before any command runs. The ledger is
  untouched and no gas is charged.
* ``CommandFailure`` - raised while commands run. The engine catches it,
  rolls back the commands and still charges the computation fee.
"""

from __future__ import annotations


class LedgerError(Exception):
    code = "LedgerError"

    def __str__(self) -> str:
        detail = super().__str__()
        return f"{self.code}: {detail}" if detail else self.code


# --- pre-execution rejections -------------------------------------------------


class TransactionRejected(LedgerError):
    code = "TransactionRejected"


class InvalidTransaction(TransactionRejected):
    code = "InvalidTransaction"


class ObjectNotFound(TransactionRejected):
    code = "ObjectNotFound"

    def __init__(self, object_id: bytes, detail: str = "") -> None:
        self.object_id = object_id
        super().__init__(f"0x{object_id.hex()}" + (f" ({detail})" if detail else ""))


class LockerNotFound(ObjectNotFound):
    code = "LockerNotFound"


class StaleObjectRef(TransactionRejected):
    code = "StaleObjectRef"

    def __init__(self, object_id: bytes, expected: int, actual: int | None) -> None:
        self.object_id = object_id
        self.expected = expected
        self.actual = actual
        super().__init__(f"0x{object_id.hex()} expected version {expected}, live version {actual}")


class MissingSignature(TransactionRejected):
    code = "MissingSignature"

    def __init__(self, address: bytes) -> None:
        self.address = address
        super().__init__(f"0x{address.hex()}")


class InvalidSignature(TransactionRejected):
    code = "InvalidSignature"

    def __init__(self, address: bytes) -> None:
        self.address = address
        super().__init__(f"0x{address.hex()}")


class ExpiredAuthenticator(InvalidSignature):
    code = "ExpiredAuthenticator"


class TransactionExpired(TransactionRejected):
    code = "TransactionExpired"


class InsufficientGas(TransactionRejected):
    code = "InsufficientGas"


# --- in-execution failures ----------------------------------------------------


class CommandFailure(LedgerError):
    code = "CommandFailure"


class InvalidCommand(CommandFailure):
    code = "InvalidCommand"


class ObjectMissing(CommandFailure):
    code = "ObjectMissing"


class DuplicateField(CommandFailure):
    code = "DuplicateField"


class UnknownField(CommandFailure):
    code = "UnknownField"


class NotOwner(CommandFailure):
    code = "NotOwner"


class NotTransferable(CommandFailure):
    code = "NotTransferable"


class InsufficientBalance(CommandFailure):
    code = "InsufficientBalance"


class EmptyLocker(CommandFailure):
    code = "EmptyLocker"


class TooManyItems(CommandFailure):
    code = "TooManyItems"


class WrongKey(CommandFailure):
    code = "WrongKey"


class GasBudgetExceeded(CommandFailure):
    """Net gas came out above the budget; reported as ``InsufficientGas``."""

    code = "InsufficientGas"


# --- persistence --------------------------------------------------------------


class SnapshotError(LedgerError):
    code = "SnapshotError"

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None) -> None:
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message}" + (f" [{', '.join(where)}]" if where else ""))
