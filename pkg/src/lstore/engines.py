"""Uniform engine interface used by the benchmark and cross-engine tests.

Every engine exposes begin/read/update/insert/delete/commit/abort/scan_sum
over integer rows whose base RID equals their load position.
"""

import numpy as np

from .engine import Database
from .table import TableConfig
from .txn import Isolation


class LStoreEngine:
    name = "lstore"

    def __init__(self, num_columns, config=None, logging=False, background_merge=True):
        self.num_columns = num_columns
        self.db = Database(logging=logging, background_merge=background_merge)
        self.table = self.db.create_table(num_columns, 0, config=config or TableConfig())
        self.txns = self.db.txns

    def load(self, rows, chunk=2048):
        rows = np.asarray(rows, dtype=np.uint64)
        t = self.table
        for s in range(0, rows.shape[0], chunk):
            ctx = self.db.begin()
            for r in rows[s:s + chunk].tolist():
                t.insert(ctx, r)
            self.db.commit(ctx)
        self.db.merger.drain()
        self.db.merge(t)

    def begin(self, isolation=Isolation.SNAPSHOT):
        return self.txns.begin(isolation)

    def read(self, ctx, rid, cols=None):
        return self.table.read(ctx, rid, cols)

    def update(self, ctx, rid, values):
        return self.table.update(ctx, rid, values)

    def insert(self, ctx, values):
        return self.table.insert(ctx, values)

    def delete(self, ctx, rid):
        return self.table.delete(ctx, rid)

    def commit(self, ctx):
        self.txns.commit(ctx)

    def abort(self, ctx):
        self.txns.abort(ctx)

    def scan_sum(self, ctx, col, lo=None, hi=None):
        return self.table.scan_sum(ctx, col, lo, hi)

    def latest(self, rid):
        ctx = self.begin()
        try:
            return self.read(ctx, rid)
        finally:
            self.commit(ctx)

    def stats(self):
        out = self.db.merger.stats.as_dict(self.db.epoch)
        out["committed"] = self.txns.committed
        out["aborted"] = self.txns.aborted
        return out

    def close(self):
        self.db.close()


def make_engine(name, num_columns, **kw):
    if name == "lstore":
        return LStoreEngine(num_columns, **kw)
    if name == "iuh":
        from .baselines.iuh import IUHEngine
        kw.pop("config", None)
        kw.pop("background_merge", None)
        kw.pop("logging", None)
        return IUHEngine(num_columns, **kw)
    if name == "dbm":
        from .baselines.dbm import DBMEngine
        return DBMEngine(num_columns, **kw)
    raise ValueError(f"unknown engine {name!r}")


ENGINES = ("lstore", "iuh", "dbm")
