"""Workload generation and the multi-threaded driver."""

import hashlib
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .._accel import BACKEND
from ..engines import ENGINES, make_engine
from ..errors import ConfigError, TxnAbort
from ..oracle import History, TxnLog
from ..table import TableConfig
from ..txn import Isolation, TxnState

# active-set sizes: desk scale is the paper scale shrunk 100x
ACTIVE_SETS = {"low": 100_000, "med": 1_000, "high": 100}
PAPER_ACTIVE_SETS = {"low": 10_000_000, "med": 100_000, "high": 10_000}


@dataclass
class WorkloadConfig:
    engine: str = "lstore"
    contention: str = "high"
    rows: int = 10_000
    columns: int = 10
    writers: int = 8
    scanners: int = 1
    mergers: int = 1
    reads_per_txn: int = 8
    writes_per_txn: int = 2
    read_ratio: float = 0.0
    scan_fraction: float = 0.1
    update_fraction: float = 0.4
    range_size: int = 4096
    merge_threshold: float = 0.5
    duration: float = 5.0
    txns: int = 0  # per writer; when > 0 the run is count-bound instead of time-bound
    seed: int = 0
    zipf: float = 0.0  # extension: 0 means uniform
    logging: bool = False
    verify: bool = False
    paper_scale: bool = False
    isolation: str = Isolation.READ_COMMITTED  # update transactions; scans always use snapshots

    def validate(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}")
        if self.contention not in ACTIVE_SETS:
            raise ConfigError("contention must be low, med or high")
        if self.rows < 1 or self.columns < 2 or self.columns > 60:
            raise ConfigError("need rows >= 1 and 2 <= columns <= 60")
        if self.writers < 0 or self.scanners < 0 or self.writers + self.scanners == 0:
            raise ConfigError("need at least one worker thread")
        if not 0.0 <= self.read_ratio <= 1.0 or not 0.0 < self.scan_fraction <= 1.0:
            raise ConfigError("ratios must lie in [0, 1]")
        if not 0.0 < self.merge_threshold <= 1.0:
            raise ConfigError("merge threshold is a fraction of the merge group span")
        if self.duration <= 0 and self.txns <= 0:
            raise ConfigError("need a duration or a transaction count")
        if self.isolation not in Isolation.ALL:
            raise ConfigError(f"unknown isolation {self.isolation}")
        if self.zipf < 0:
            raise ConfigError("zipf theta must be >= 0")
        return self

    @property
    def active_set(self):
        sets = PAPER_ACTIVE_SETS if self.paper_scale else ACTIVE_SETS
        return min(sets[self.contention], self.rows)

    def table_config(self):
        return TableConfig(range_size=self.range_size,
                           insert_range_size=max(self.range_size, 65536),
                           merge_threshold=self.merge_threshold,
                           merge_group=1)


@dataclass
class ThreadStats:
    role: str
    index: int
    committed: int = 0
    aborted: int = 0
    scan_ms: list = field(default_factory=list)

    def summary(self):
        out = {"role": self.role, "index": self.index,
               "committed": self.committed, "aborted": self.aborted}
        if self.role == "scanner":
            out["scans"] = len(self.scan_ms)
        return out


@dataclass
class RunReport:
    config: dict
    engine: str
    threads: int
    contention: str
    elapsed_s: float
    committed: int
    aborted: int
    attempted: int
    txn_per_sec: float
    abort_rate: float
    scans: int
    scan_p50_ms: float
    scan_p95_ms: float
    scan_mean_ms: float
    merge: dict
    per_thread: list
    backend: str = BACKEND
    verified: object = None
    mismatches: int = 0
    state_hash: str = ""

    def as_dict(self):
        return asdict(self)


def initial_rows(cfg):
    rng = np.random.default_rng(cfg.seed)
    vals = rng.integers(0, 1 << 20, size=(cfg.rows, cfg.columns), dtype=np.uint64)
    vals[:, 0] = np.arange(cfg.rows, dtype=np.uint64)
    return vals


def active_keys(cfg):
    """The hot rows, spread over the whole table so every range sees updates."""
    rng = np.random.default_rng(cfg.seed + 7919)
    return np.sort(rng.permutation(cfg.rows)[:cfg.active_set])


class KeyPicker:
    def __init__(self, keys, zipf, rng):
        self.keys = keys
        self.rng = rng
        self.p = None
        if zipf > 0:
            w = 1.0 / np.arange(1, keys.shape[0] + 1) ** zipf
            self.p = w / w.sum()

    def draw(self, n):
        if self.p is None:
            return self.keys[self.rng.integers(0, self.keys.shape[0], size=n)].tolist()
        return self.rng.choice(self.keys, size=n, p=self.p).tolist()


def _writer(eng, cfg, keys, st, stop, hist, seed):
    rng = np.random.default_rng(seed)
    picker = KeyPicker(keys, cfg.zipf, rng)
    ncol = cfg.columns
    p = min(1.0, cfg.update_fraction * ncol / (ncol - 1))
    done = 0
    while not stop.is_set() and (cfg.txns <= 0 or done < cfg.txns):
        done += 1
        ro = rng.random() < cfg.read_ratio
        reads = picker.draw(cfg.reads_per_txn)
        writes = [] if ro else picker.draw(cfg.writes_per_txn)
        updates = []
        for _ in writes:
            k = max(1, int(rng.binomial(ncol - 1, p)))
            cols = np.sort(rng.choice(np.arange(1, ncol), size=k, replace=False)).tolist()
            updates.append({c: int(v) for c, v in zip(cols, rng.integers(0, 1 << 20, size=k))})
        ctx = eng.begin(cfg.isolation)
        log = hist.start(ctx) if hist is not None else None
        try:
            for rid in reads:
                got = eng.read(ctx, rid)
                if log is not None:
                    log.ops.append(("r", rid, list(range(ncol)), got))
            for rid, vals in zip(writes, updates):
                eng.update(ctx, rid, vals)
                if log is not None:
                    log.ops.append(("u", rid, vals))
            eng.commit(ctx)
        except TxnAbort:
            if ctx.state in (TxnState.ACTIVE, TxnState.PRECOMMIT):
                eng.abort(ctx)
            st.aborted += 1
            continue
        st.committed += 1
        if log is not None:
            log.commit = ctx.commit_time
            log.committed = True


def _scanner(eng, cfg, st, stop, hist, seed, writers_done):
    rng = np.random.default_rng(seed)
    span = max(1, int(cfg.rows * cfg.scan_fraction))
    while not stop.is_set() and not writers_done():
        lo = int(rng.integers(0, cfg.rows - span + 1))
        col = int(rng.integers(1, cfg.columns))
        ctx = eng.begin(Isolation.SNAPSHOT)
        log = hist.start(ctx) if hist is not None else None
        t0 = time.perf_counter()
        try:
            total = eng.scan_sum(ctx, col, lo, lo + span)
            eng.commit(ctx)
        except TxnAbort:
            if ctx.state in (TxnState.ACTIVE, TxnState.PRECOMMIT):
                eng.abort(ctx)
            st.aborted += 1
            continue
        st.scan_ms.append((time.perf_counter() - t0) * 1e3)
        st.committed += 1
        if log is not None:
            log.ops.append(("s", col, lo, lo + span, total))
            log.commit = ctx.commit_time
            log.committed = True


def state_hash(eng, rows):
    h = hashlib.sha256()
    ctx = eng.begin(Isolation.SNAPSHOT)
    for rid in range(rows):
        got = eng.read(ctx, rid)
        h.update(repr(None if got is None else sorted(got.items())).encode())
    eng.commit(ctx)
    return h.hexdigest()


def _percentile(xs, q):
    if not xs:
        return 0.0
    return float(np.percentile(np.asarray(xs), q))


def build_engine(cfg):
    kw = {}
    if cfg.engine != "iuh":
        kw = {"config": cfg.table_config(), "logging": cfg.logging,
              "background_merge": cfg.mergers > 0}
    return make_engine(cfg.engine, cfg.columns, **kw)


def run_workload(cfg):
    cfg.validate()
    eng = build_engine(cfg)
    try:
        rows = initial_rows(cfg)
        eng.load(rows)
        hist = None
        if cfg.verify:
            hist = History()
            seed_log = TxnLog(0, Isolation.SNAPSHOT)
            seed_log.ops = [("i", r, tuple(int(x) for x in rows[r])) for r in range(cfg.rows)]
            seed_log.commit = 0
            seed_log.committed = True
            hist.txns.append(seed_log)
        keys = active_keys(cfg)
        stop = threading.Event()
        stats, threads = [], []
        writer_threads = []
        for i in range(cfg.writers):
            st = ThreadStats("writer", i)
            stats.append(st)
            t = threading.Thread(target=_writer, name=f"writer-{i}",
                                 args=(eng, cfg, keys, st, stop, hist, cfg.seed * 1000 + i + 1))
            threads.append(t)
            writer_threads.append(t)

        def writers_done():
            return cfg.txns > 0 and bool(writer_threads) and not any(t.is_alive() for t in writer_threads)

        for i in range(cfg.scanners):
            st = ThreadStats("scanner", i)
            stats.append(st)
            threads.append(threading.Thread(target=_scanner, name=f"scanner-{i}",
                                            args=(eng, cfg, st, stop, hist,
                                                  cfg.seed * 1000 + 500 + i, writers_done)))
        t0 = time.perf_counter()
        for t in threads:
            t.start()
        if cfg.txns > 0:
            for t in writer_threads:
                t.join()
            if not writer_threads:
                time.sleep(cfg.duration)
            stop.set()
        else:
            stop.wait(cfg.duration)
            stop.set()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - t0
        report = _report(cfg, eng, stats, elapsed)
        if cfg.verify:
            oracle = hist.oracle(cfg.columns)
            bad = hist.check(oracle)
            final_bad = 0
            ctx = eng.begin(Isolation.SNAPSHOT)
            for rid in range(cfg.rows):
                got = eng.read(ctx, rid)
                exp = oracle.latest(rid)
                exp = None if exp is None else dict(enumerate(exp))
                if got != exp:
                    final_bad += 1
            eng.commit(ctx)
            report.mismatches = len(bad) + final_bad
            report.verified = report.mismatches == 0
        if cfg.txns > 0 or cfg.verify:
            report.state_hash = state_hash(eng, cfg.rows)
        return report
    finally:
        eng.close()


def _report(cfg, eng, stats, elapsed):
    w = [s for s in stats if s.role == "writer"]
    sc = [s for s in stats if s.role == "scanner"]
    committed = sum(s.committed for s in w)
    aborted = sum(s.aborted for s in w)
    attempted = committed + aborted
    scan_ms = [x for s in sc for x in s.scan_ms]
    merge = {k: v for k, v in eng.stats().items() if k not in ("committed", "aborted")}
    return RunReport(
        config=asdict(cfg),
        engine=cfg.engine,
        threads=cfg.writers + cfg.scanners + (cfg.mergers if cfg.engine != "iuh" else 0),
        contention=cfg.contention,
        elapsed_s=round(elapsed, 4),
        committed=committed,
        aborted=aborted,
        attempted=attempted,
        txn_per_sec=round(committed / elapsed, 2) if elapsed > 0 else 0.0,
        abort_rate=round(aborted / attempted, 6) if attempted else 0.0,
        scans=len(scan_ms),
        scan_p50_ms=round(_percentile(scan_ms, 50), 4),
        scan_p95_ms=round(_percentile(scan_ms, 95), 4),
        scan_mean_ms=round(statistics.fmean(scan_ms), 4) if scan_ms else 0.0,
        merge=merge,
        per_thread=[s.summary() for s in stats],
    )
