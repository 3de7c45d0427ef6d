"""Delta store with a blocking merge.

Updates append to a range-partitioned delta (the same append-only tail layout
the lineage engine uses), but consolidation is stop-the-world: the merger
closes admission, waits for every running transaction to finish, merges, and
reopens. Time spent behind the barrier is reported as stall time.
"""

import threading
import time

from ..engines import LStoreEngine
from ..merge import Merger


class Gate:
    """Admission barrier. Transactions enter/leave; the merger drains it."""

    def __init__(self):
        self._cond = threading.Condition()
        self.active = 0
        self.closed = False
        self.stall_s = 0.0
        self.stalls = 0

    def enter(self):
        with self._cond:
            if self.closed:
                t0 = time.perf_counter()
                while self.closed:
                    self._cond.wait()
                self.stall_s += time.perf_counter() - t0
                self.stalls += 1
            self.active += 1

    def leave(self):
        with self._cond:
            self.active -= 1
            if self.active == 0:
                self._cond.notify_all()

    def close_and_drain(self):
        with self._cond:
            self.closed = True
            while self.active > 0:
                self._cond.wait()

    def open(self):
        with self._cond:
            self.closed = False
            self._cond.notify_all()


def dbm_merge(merger, table, ranges):
    """Quiesce all transactions, consolidate ``ranges``, resume. Returns merges run."""
    ranges = [r for r in ranges if _has_delta(table, r)]
    if not ranges:
        return 0
    gate = merger.gate
    t0 = time.perf_counter()
    gate.close_and_drain()
    merger.drain_wait_s += time.perf_counter() - t0
    try:
        n = 0
        for rng in ranges:
            n += Merger.merge_range(merger, table, rng)
        return n
    finally:
        gate.open()
        merger.blocked_s += time.perf_counter() - t0


def _has_delta(table, rng):
    last = table.insert_ranges[-1]
    end = last.lo + last.next
    return rng.written_seq > max(rng.tps) or rng.lo + rng.insert_merged < min(end, rng.hi)


class BlockingMerger(Merger):
    def __init__(self, db, gate, background=False):
        super().__init__(db, background=background)
        self.gate = gate
        self.drain_wait_s = 0.0
        self.blocked_s = 0.0

    def _process(self, table, group):
        with self._qlock:
            self._queued.discard((table.table_id, group))
        g = table.cfg.merge_group
        dbm_merge(self, table, table.ranges[group * g:(group + 1) * g])
        self.db.epoch.advance()

    def merge_table(self, table):
        n = dbm_merge(self, table, list(table.ranges))
        self.db.epoch.advance()
        return n


class DBMEngine(LStoreEngine):
    name = "dbm"

    def __init__(self, num_columns, config=None, logging=False, background_merge=True):
        super().__init__(num_columns, config=config, logging=logging, background_merge=False)
        db = self.db
        self.gate = Gate()
        db.merger = BlockingMerger(db, self.gate, background=background_merge)
        db.txns.gate = self.gate
        if background_merge:
            db.merger.start()

    def stats(self):
        out = super().stats()
        m = self.db.merger
        out["stall_s"] = round(self.gate.stall_s, 6)
        out["stalled_txns"] = self.gate.stalls
        out["drain_wait_s"] = round(m.drain_wait_s, 6)
        out["blocked_s"] = round(m.blocked_s, 6)
        return out
