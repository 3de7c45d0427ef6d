"""In-place update + history.

The main table holds only the latest version of every row, overwritten in
place under an exclusive page latch. Before each overwrite the displaced
values of the updated columns (plus the old StartTime, delete flag and back
pointer) are appended to an append-only history store, and the row's
indirection cell is pointed at that entry. Readers take shared page latches
and walk the history chain when the in-place version is not visible to them.
Abort restores the displaced values from history.
"""

import threading

import numpy as np

from ..epoch import EpochManager
from ..errors import IllegalTransition, UnknownRecord, WriteWriteConflict
from ..page_store import BASE_PAGE_SLOTS, LATCH_BIT
from ..sync import CasArray, Clock, RWLatch
from ..table import latch_cell
from ..txn import PENDING, VISIBLE, Isolation, Snap, TxnManager, TxnState

NO_HIST = -1


class _Block:
    __slots__ = ("values", "start", "ind", "deleted", "exists", "latch", "wbit")

    def __init__(self, ncols, rows):
        self.values = np.zeros((ncols, rows), dtype=np.uint64)
        self.start = np.zeros(rows, dtype=np.uint64)
        self.ind = np.full(rows, NO_HIST, dtype=np.int64)
        self.deleted = np.zeros(rows, dtype=np.bool_)
        self.exists = np.zeros(rows, dtype=np.bool_)
        self.latch = RWLatch()
        self.wbit = CasArray(rows)


class History:
    """Append-only store of displaced versions (updated columns only)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries = []  # (rid, {col: old value}, old start, old deleted, prev)

    def append(self, entry):
        with self._lock:
            self.entries.append(entry)
            return len(self.entries) - 1

    def __getitem__(self, i):
        return self.entries[i]

    def __len__(self):
        return len(self.entries)


class _Shell:
    """The pieces of a database a TxnManager needs."""

    def __init__(self):
        self.clock = Clock()
        self.epoch = EpochManager()
        self.wal = None


class IUHTable:
    def __init__(self, num_columns, key_column=0, block_rows=BASE_PAGE_SLOTS, db=None):
        self.num_columns = num_columns
        self.key_column = key_column
        self.block_rows = block_rows
        self.db = db or _Shell()
        if getattr(self.db, "txns", None) is None:
            self.db.txns = TxnManager(self.db)
        self.txns = self.db.txns.table
        self.blocks = []
        self.history = History()
        self.primary = {}
        self._next = 0
        self._grow = threading.Lock()
        self.all_cols = list(range(num_columns))

    # ---- layout -------------------------------------------------------

    def _block(self, rid):
        b, i = divmod(rid, self.block_rows)
        if b >= len(self.blocks):
            raise UnknownRecord(rid)
        return self.blocks[b], i

    def _reserve(self):
        with self._grow:
            rid = self._next
            self._next += 1
            if rid // self.block_rows >= len(self.blocks):
                self.blocks.append(_Block(self.num_columns, self.block_rows))
            return rid

    # ---- writes -------------------------------------------------------

    def insert(self, ctx, values):
        if ctx.state != TxnState.ACTIVE:
            raise IllegalTransition("insert needs an active transaction")
        key = values[self.key_column]
        with self._grow:
            if key in self.primary:
                from ..errors import DuplicateKey
                raise DuplicateKey(key)
            self.primary[key] = -1
        rid = self._reserve()
        self.primary[key] = rid
        blk, i = self._block(rid)
        blk.latch.acquire_exclusive()
        try:
            blk.values[:, i] = values
            blk.start[i] = PENDING | ctx.txn_id
            blk.exists[i] = True
        finally:
            blk.latch.release_exclusive()
        ctx.inserts.append((self, rid, key))
        return rid

    def load(self, rows, start=1):
        """Bulk-load committed rows at time ``start`` (no concurrency)."""
        rows = np.asarray(rows, dtype=np.uint64)
        for r in range(rows.shape[0]):
            rid = self._reserve()
            self.primary[int(rows[r, self.key_column])] = rid
        n = rows.shape[0]
        for b in range(0, n, self.block_rows):
            blk = self.blocks[b // self.block_rows]
            m = min(self.block_rows, n - b)
            blk.values[:, :m] = rows[b:b + m].T
            blk.start[:m] = start
            blk.exists[:m] = True

    def rollback_insert(self, rid, key):
        blk, i = self._block(rid)
        blk.latch.acquire_exclusive()
        try:
            blk.exists[i] = False
        finally:
            blk.latch.release_exclusive()
        with self._grow:
            if self.primary.get(key) == rid:
                del self.primary[key]

    def update(self, ctx, rid, values):
        return iuh_update(self, ctx, rid, values, False)

    def delete(self, ctx, rid):
        return iuh_update(self, ctx, rid, None, True)

    def rollback_link(self, blk, i, h, _unused):
        _, old, start, deleted, prev = self.history[h]
        blk.latch.acquire_exclusive()
        try:
            for c, v in old.items():
                blk.values[c, i] = v
            blk.start[i] = start
            blk.deleted[i] = deleted
            blk.ind[i] = prev
        finally:
            blk.latch.release_exclusive()

    # ---- reads --------------------------------------------------------

    def _version(self, rid, snap, cols):
        """(token, values list) of the version visible at ``snap`` or None."""
        blk, i = self._block(rid)
        blk.latch.acquire_shared()
        try:
            if not blk.exists[i]:
                return None
            start = int(blk.start[i])
            vals = blk.values[cols, i].tolist()
            deleted = bool(blk.deleted[i])
            h = int(blk.ind[i])
        finally:
            blk.latch.release_shared()
        verdict, t = self.txns.visibility(start, snap)
        while verdict != VISIBLE:
            if h == NO_HIST:
                return None
            _, old, start, deleted, h2 = self.history[h]
            for k, c in enumerate(cols):
                v = old.get(c)
                if v is not None:
                    vals[k] = v
            h = h2
            verdict, t = self.txns.visibility(start, snap)
        if deleted:
            return None
        return (t if t is not None else start), vals

    def read(self, ctx, rid, cols=None):
        if ctx.state != TxnState.ACTIVE:
            raise IllegalTransition("read needs an active transaction")
        cols = self.all_cols if cols is None else list(cols)
        snap = self.db.txns.snap_for(ctx)
        got = self._version(rid, snap, cols)
        if ctx.isolation == Isolation.SERIALIZABLE:
            ctx.readset.append((self, rid, None if got is None else got[0], False))
        return None if got is None else dict(zip(cols, got[1]))

    def visible_rid(self, rid, snap):
        got = self._version(rid, snap, [])
        return None if got is None else got[0]

    def scan_sum(self, ctx, col, lo=None, hi=None):
        snap = self.db.txns.snap_for(ctx)
        return self.scan_sum_snap(snap, col, lo, hi)

    def scan_sum_snap(self, snap, col, lo=None, hi=None):
        lo = 0 if lo is None else max(lo, 0)
        hi = self._next if hi is None else min(hi, self._next)
        total = 0
        B = self.block_rows
        t = np.uint64(snap.time)
        for b in range(lo // B, (hi - 1) // B + 1 if hi > lo else 0):
            blk = self.blocks[b]
            s, e = max(lo, b * B) - b * B, min(hi, (b + 1) * B) - b * B
            slow = []
            # the page stays share-latched for the whole pass
            blk.latch.acquire_shared()
            try:
                starts = blk.start[s:e]
                ok = blk.exists[s:e] & (starts < t)  # committed before the snapshot (pending ids are huge)
                total += int(blk.values[col, s:e][ok & ~blk.deleted[s:e]].sum())
                late = blk.exists[s:e] & ~ok
                if late.any():
                    slow = (np.nonzero(late)[0] + s + b * B).tolist()
            finally:
                blk.latch.release_shared()
            for rid in slow:
                got = self._version(rid, snap, [col])
                if got is not None:
                    total += got[1][0]
        return total


def iuh_update(table, ctx, rid, values, delete):
    """Overwrite ``rid`` in place after saving its displaced values to history."""
    if ctx.state != TxnState.ACTIVE:
        raise IllegalTransition("write needs an active transaction")
    blk, i = table._block(rid)
    if latch_cell(blk.wbit, i) is None:
        _conflict(rid)
    try:
        blk.latch.acquire_exclusive()
        try:
            if not blk.exists[i]:
                raise UnknownRecord(rid)
            start = int(blk.start[i])
            mine = PENDING | ctx.txn_id
            if start != mine:
                t = table.txns.resolve(start)
                if t is None:
                    # running, validating, or aborted but not yet restored
                    _conflict(rid)
                if ctx.isolation != Isolation.READ_COMMITTED and t >= ctx.begin_time:
                    _conflict(rid)
            if blk.deleted[i]:
                raise UnknownRecord(rid)
            cols = table.all_cols if delete else list(values)
            old = {c: int(blk.values[c, i]) for c in cols} if not delete else {}
            h = table.history.append((rid, old, start, bool(blk.deleted[i]), int(blk.ind[i])))
            if delete:
                blk.deleted[i] = True
            else:
                for c, v in values.items():
                    blk.values[c, i] = v
            blk.start[i] = mine
            blk.ind[i] = h
        finally:
            blk.latch.release_exclusive()
    finally:
        blk.wbit.cas(i, LATCH_BIT, 0)
    ctx.writeset.append((table, blk, i, h, None))
    return h


def _conflict(rid):
    raise WriteWriteConflict(f"row {rid} is being written by another transaction")


class IUHEngine:
    name = "iuh"

    def __init__(self, num_columns, block_rows=BASE_PAGE_SLOTS):
        self.num_columns = num_columns
        self.table = IUHTable(num_columns, block_rows=block_rows)
        self.db = self.table.db
        self.txns = self.db.txns

    def load(self, rows):
        self.db.clock.advance_to(2)
        self.table.load(rows, start=1)

    def begin(self, isolation=Isolation.SNAPSHOT):
        return self.txns.begin(isolation)

    def read(self, ctx, rid, cols=None):
        return self.table.read(ctx, rid, cols)

    def _guard(self, ctx, fn, *args):
        try:
            return fn(*args)
        except WriteWriteConflict:
            if ctx.state == TxnState.ACTIVE:
                self.txns.abort(ctx)
            raise

    def update(self, ctx, rid, values):
        return self._guard(ctx, self.table.update, ctx, rid, values)

    def insert(self, ctx, values):
        return self.table.insert(ctx, values)

    def delete(self, ctx, rid):
        return self._guard(ctx, self.table.delete, ctx, rid)

    def commit(self, ctx):
        self.txns.commit(ctx)

    def abort(self, ctx):
        self.txns.abort(ctx)

    def scan_sum(self, ctx, col, lo=None, hi=None):
        return self.table.scan_sum(ctx, col, lo, hi)

    def stats(self):
        return {"committed": self.txns.committed, "aborted": self.txns.aborted,
                "history_entries": len(self.table.history)}

    def close(self):
        pass
