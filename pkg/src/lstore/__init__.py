"""Lineage-based storage engine: read-only base pages, append-only tail pages,
contention-free background merging and optimistic multi-version transactions."""

from ._accel import BACKEND
from .engine import Database
from .errors import (
    ConfigError,
    DuplicateKey,
    LStoreError,
    TxnAbort,
    UnknownRecord,
    ValidationFailed,
    WriteWriteConflict,
)
from .table import RecordVersion, Table, TableConfig
from .txn import Isolation, TxnState

__all__ = [
    "BACKEND",
    "ConfigError",
    "Database",
    "DuplicateKey",
    "Isolation",
    "LStoreError",
    "RecordVersion",
    "Table",
    "TableConfig",
    "TxnAbort",
    "TxnState",
    "UnknownRecord",
    "ValidationFailed",
    "WriteWriteConflict",
]

__version__ = "0.1.0"
