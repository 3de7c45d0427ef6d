"""Optimistic multi-version concurrency control.

Transaction states go Active -> PreCommit -> {Committed, Aborted} or
Active -> Aborted. Record StartTime cells hold either a commit time or a
pending transaction id (top bit set); readers consult the transaction table
for pending ids and swap in the commit time lazily.
"""

import threading
import time
from enum import IntEnum

from .errors import IllegalTransition, TxnAbort, ValidationFailed

PENDING = 1 << 63
TXN_MASK = PENDING - 1


class TxnState(IntEnum):
    ACTIVE = 0
    PRECOMMIT = 1
    COMMITTED = 2
    ABORTED = 3


class Isolation:
    READ_COMMITTED = "read_committed"
    SNAPSHOT = "snapshot"
    SERIALIZABLE = "serializable"
    ALL = (READ_COMMITTED, SNAPSHOT, SERIALIZABLE)


# visibility verdicts
VISIBLE = 1
INVISIBLE = 0
DEAD = -1


class TransactionContext:
    __slots__ = ("txn_id", "begin_time", "commit_time", "state", "isolation",
                 "readset", "writeset", "inserts", "index_ops", "deps", "lsns")

    def __init__(self, txn_id, begin_time, isolation):
        self.txn_id = txn_id
        self.begin_time = begin_time
        self.commit_time = None
        self.state = TxnState.ACTIVE
        self.isolation = isolation
        self.readset = []
        self.writeset = []
        self.inserts = []
        self.index_ops = []
        self.deps = []
        self.lsns = []

    def __repr__(self):
        return f"<Txn {self.txn_id} {self.state.name} begin={self.begin_time} commit={self.commit_time}>"

    @property
    def active(self):
        return self.state == TxnState.ACTIVE

    @property
    def pending_mark(self):
        return self.txn_id | PENDING


class Snap:
    """Visibility bound for one read: versions with time < ``time`` qualify."""

    __slots__ = ("time", "tid", "speculative", "deps")

    def __init__(self, time, tid=None, speculative=False):
        self.time = time
        self.tid = tid
        self.speculative = speculative
        self.deps = None


class TxnTable:
    """txn id -> context. Entries stay resolvable for the engine's lifetime."""

    def __init__(self):
        self._map = {}

    def __getitem__(self, tid):
        return self._map[tid]

    def get(self, tid):
        return self._map.get(tid)

    def add(self, ctx):
        self._map[ctx.txn_id] = ctx

    def __len__(self):
        return len(self._map)

    def visibility(self, start_cell, snap):
        """Classify one StartTime cell against a snapshot.

        Returns (verdict, resolved_time). resolved_time is the commit time when
        the writer has committed, else None.
        """
        if start_cell & PENDING:
            tid = start_cell & TXN_MASK
            if tid == snap.tid:
                return VISIBLE, None
            t = self._map.get(tid)
            if t is None:
                return DEAD, None
            st = t.state
            if st == TxnState.COMMITTED:
                ct = t.commit_time
                return (VISIBLE if ct < snap.time else INVISIBLE), ct
            if st == TxnState.ABORTED:
                return DEAD, None
            if st == TxnState.PRECOMMIT and t.commit_time < snap.time:
                if snap.speculative:
                    if snap.deps is None:
                        snap.deps = []
                    snap.deps.append(tid)
                    return VISIBLE, None
                # the outcome decides this snapshot; validation is short, so wait for it
                while t.state == TxnState.PRECOMMIT:
                    time.sleep(0)
                return self.visibility(start_cell, snap)
            return INVISIBLE, None
        return (VISIBLE if start_cell < snap.time else INVISIBLE), start_cell

    def is_final(self, start_cell):
        if not start_cell & PENDING:
            return True
        t = self._map.get(start_cell & TXN_MASK)
        return t is None or t.state >= TxnState.COMMITTED

    def resolve(self, start_cell):
        """Commit time for a final cell, None if its writer aborted or is still running."""
        if not start_cell & PENDING:
            return start_cell
        t = self._map.get(start_cell & TXN_MASK)
        if t is not None and t.state == TxnState.COMMITTED:
            return t.commit_time
        return None


class TxnManager:
    """begin / validate / commit / abort. Reads and writes live on the table."""

    def __init__(self, db):
        self.db = db
        self.clock = db.clock
        self.table = TxnTable()
        self.committed = 0
        self.aborted = 0
        self._stats_lock = threading.Lock()
        self.gate = None  # optional admission gate (blocking-merge baseline)

    def begin(self, isolation=Isolation.SNAPSHOT):
        if isolation not in Isolation.ALL:
            raise ValueError(f"unknown isolation {isolation!r}")
        if self.gate is not None:
            self.gate.enter()
        t = self.clock.tick()
        ctx = TransactionContext(t, t, isolation)
        self.table.add(ctx)
        self.db.epoch.enter(t, t)
        return ctx

    def snap_for(self, ctx, speculative=False):
        if ctx.isolation == Isolation.READ_COMMITTED:
            return Snap(self.clock.now() + 1, ctx.txn_id, speculative)
        return Snap(ctx.begin_time, ctx.txn_id, speculative)

    def validate(self, ctx):
        """Acquire the commit time, enter PreCommit and re-check the readset."""
        if ctx.state != TxnState.ACTIVE:
            raise IllegalTransition(f"validate from {ctx.state.name}")
        def enter(t):
            ctx.commit_time = t
            ctx.state = TxnState.PRECOMMIT

        # a reader that begins after our commit time must already see PreCommit
        self.clock.tick_with(enter)
        if ctx.isolation == Isolation.SERIALIZABLE:
            for table, rid, vis, speculative in ctx.readset:
                now = table.visible_rid(rid, Snap(ctx.commit_time))
                if now != vis and not speculative:
                    return False
        for tid in ctx.deps:
            if not self._wait_committed(tid):
                return False
        if ctx.isolation == Isolation.SERIALIZABLE:
            # speculative entries must still name the same version once the writer is in
            for table, rid, vis, speculative in ctx.readset:
                if speculative and table.visible_rid(rid, Snap(ctx.commit_time)) != vis:
                    return False
        return True

    def _wait_committed(self, tid, timeout=5.0):
        t = self.table.get(tid)
        deadline = time.monotonic() + timeout
        while t.state == TxnState.PRECOMMIT:
            if time.monotonic() > deadline:
                return False
            time.sleep(0)
        return t.state == TxnState.COMMITTED

    def commit(self, ctx):
        if ctx.state == TxnState.ACTIVE:
            if not self.validate(ctx):
                self.abort(ctx)
                raise ValidationFailed(f"txn {ctx.txn_id} failed validation")
        if ctx.state != TxnState.PRECOMMIT:
            raise IllegalTransition(f"commit from {ctx.state.name}")
        wal = self.db.wal
        if wal is not None and (ctx.writeset or ctx.inserts):
            wal.log_commit(ctx)
        ctx.state = TxnState.COMMITTED
        self.db.epoch.exit(ctx.txn_id)
        if self.gate is not None:
            self.gate.leave()
        for op in ctx.index_ops:
            op.on_commit(ctx)
        with self._stats_lock:
            self.committed += 1

    def abort(self, ctx):
        if ctx.state not in (TxnState.ACTIVE, TxnState.PRECOMMIT):
            raise IllegalTransition(f"abort from {ctx.state.name}")
        if ctx.commit_time is None:
            ctx.commit_time = self.clock.tick()
        ctx.state = TxnState.ABORTED
        for table, rng, off, new_rid, prev_cell in reversed(ctx.writeset):
            table.rollback_link(rng, off, new_rid, prev_cell)
        for table, rid, key in ctx.inserts:
            table.rollback_insert(rid, key)
        for op in ctx.index_ops:
            op.on_abort(ctx)
        wal = self.db.wal
        if wal is not None and (ctx.writeset or ctx.inserts):
            wal.log_abort(ctx)
        self.db.epoch.exit(ctx.txn_id)
        if self.gate is not None:
            self.gate.leave()
        with self._stats_lock:
            self.aborted += 1

    def run(self, fn, isolation=Isolation.SNAPSHOT):
        """Run ``fn(ctx)`` in a transaction; commit or abort. Returns fn's result."""
        ctx = self.begin(isolation)
        try:
            out = fn(ctx)
        except TxnAbort:
            if ctx.state in (TxnState.ACTIVE, TxnState.PRECOMMIT):
                self.abort(ctx)
            raise
        except BaseException:
            self.abort(ctx)
            raise
        self.commit(ctx)
        return out
