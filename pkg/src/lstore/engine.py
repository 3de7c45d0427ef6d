"""Engine facade: one clock, one transaction table, tables, merge worker, log."""

from dataclasses import asdict

from .durability import Wal
from .epoch import EpochManager
from .merge import Merger
from .page_store import PageStore
from .sync import Clock
from .table import Table, TableConfig
from .txn import Isolation, TxnManager


class Database:
    def __init__(self, logging=False, log_path=None, fsync=False, background_merge=False,
                 theta_s=256, log_buffer=64 * 1024):
        self.clock = Clock()
        self.store = PageStore()
        self.epoch = EpochManager()
        self.wal = Wal(log_path, fsync=fsync, buffer_bytes=log_buffer, theta_s=theta_s) if logging else None
        self.txns = TxnManager(self)
        self.merger = Merger(self, background=background_merge)
        self.tables = {}
        self._names = {}
        self._next_table = 0
        if background_merge:
            self.merger.start()

    def create_table(self, num_columns, key_column=0, range_size=None, config=None, name=None):
        cfg = config or TableConfig()
        if range_size is not None:
            cfg = TableConfig(**{**asdict(cfg), "range_size": range_size,
                                 "insert_range_size": max(cfg.insert_range_size, range_size)})
        cfg.validate()
        tid = self._next_table
        self._next_table += 1
        name = name or f"t{tid}"
        if self.wal is not None:
            self.wal.log_directory(tid, "create_table", num_columns, key_column, asdict(cfg), name)
        t = Table(self, tid, num_columns, key_column, cfg, name=name)
        self.tables[tid] = t
        self._names[name] = tid
        return t

    def table(self, name):
        if isinstance(name, int):
            return self.tables[name]
        return self.tables[self._names[name]]

    def historic_for(self, table, rng):
        return table.directory.get(("hist", 0, rng.range_id, 0))

    # ---- transactions ---------------------------------------------------

    def begin(self, isolation=Isolation.SNAPSHOT):
        return self.txns.begin(isolation)

    def commit(self, ctx):
        return self.txns.commit(ctx)

    def abort(self, ctx):
        return self.txns.abort(ctx)

    def run(self, fn, isolation=Isolation.SNAPSHOT):
        return self.txns.run(fn, isolation)

    # ---- maintenance ----------------------------------------------------

    def merge(self, table=None):
        """Synchronously merge every range of one table (or all tables)."""
        tables = [table] if table is not None else list(self.tables.values())
        return sum(self.merger.merge_table(t) for t in tables)

    def close(self):
        if self.merger is not None:
            self.merger.stop()
        if self.wal is not None:
            self.wal.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
