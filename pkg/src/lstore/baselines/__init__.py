"""Comparison engines: in-place update + history (IUH) and delta + blocking merge (DBM)."""

from .dbm import DBMEngine, Gate, dbm_merge
from .iuh import IUHEngine, IUHTable, iuh_update

__all__ = ["DBMEngine", "Gate", "IUHEngine", "IUHTable", "dbm_merge", "iuh_update"]
