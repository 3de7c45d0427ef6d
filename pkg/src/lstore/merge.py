"""Background consolidation of committed tail records into read-only pages.

A merge takes a contiguous run of committed tail records of one update range,
applies the newest version of each base row on a private copy of the affected
base pages, seals the copies and publishes them with one directory swap per
page. The replaced pages are handed to the epoch reclaimer. Indirection cells
are never touched, so foreground writers do not wait on a merge.
"""

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import MergeBatchError
from .page_store import TAIL_PAGE_SLOTS, BaseGroup, Page, PageKind, decode_link
from .txn import PENDING, TXN_MASK, TxnState

TS = TAIL_PAGE_SLOTS
USE_BASE = "UseBasePage"
FOLLOW_TAIL = "FollowTail"
_SNAP = np.uint64(1 << 63)
_COLS = np.uint64((1 << 60) - 1)
_DELETED = np.uint64(1 << 62)


def interpret_indirection(cell, page_tps, seq_of):
    """Decide whether a base page already reflects the row's latest tail record."""
    link = decode_link(cell)
    if link is None or link < (1 << 63):
        return USE_BASE
    return USE_BASE if seq_of(link) <= page_tps else FOLLOW_TAIL


def check_read_consistency(pages):
    """Pages read for one range are consistent iff they share one TPS."""
    tps = [p.tps for p in pages]
    if len(set(tps)) <= 1:
        return True, None
    return False, {"tps": tps, "columns": [p.column_id for p in pages]}


@dataclass
class MergeBatch:
    range_id: int
    from_seq: int
    to_seq: int
    columns: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return self.to_seq - self.from_seq + 1


@dataclass
class MergeResult:
    batch: MergeBatch
    pages: dict  # directory key -> new page
    tps: int
    applied: int
    consolidated: int
    groups: dict = None  # page number -> BaseGroup, whole-row merges only


class TailView:
    """Columnar copy of tail records [frm, to] of one range."""

    def __init__(self, table, rng, frm, to, cols, partial=False):
        n = to - frm + 1
        self.frm = frm
        self.enc = np.zeros(n, dtype=np.uint64)
        self.start = np.zeros(n, dtype=np.uint64)
        self.base = np.zeros(n, dtype=np.uint64)
        self.present = np.zeros(n, dtype=np.bool_)
        self.vals = np.zeros((len(cols), n), dtype=np.uint64)
        d = table.directory
        rid = rng.range_id
        for pno in range((frm - 1) // TS, (to - 1) // TS + 1):
            s0 = pno * TS + 1
            a, b = max(frm, s0), min(to, s0 + TS - 1)
            i, j, o = a - s0, b - s0 + 1, a - frm
            k = j - i
            sp = d.get(("tail", table.SCHEMA, rid, pno))
            if sp is None:
                if partial:  # reserved by a writer whose tail row is not created yet
                    break
                raise MergeBatchError(f"tail page {pno} of range {rid} is gone")
            self.present[o:o + k] = sp.present[i:j]
            self.enc[o:o + k] = sp.slots[i:j]
            self.start[o:o + k] = d.get(("tail", table.START, rid, pno)).slots[i:j]
            self.base[o:o + k] = d.get(("tail", table.BASE_RID, rid, pno)).slots[i:j]
            for ci, c in enumerate(cols):
                p = d.get(("tail", c, rid, pno))
                if p is not None:
                    self.vals[ci, o:o + k] = p.slots[i:j]


def resolve_starts(txns, start):
    """(commit times, final mask, aborted mask) for raw StartTime cells."""
    out = start.copy()
    final = np.ones(start.shape[0], dtype=np.bool_)
    aborted = np.zeros(start.shape[0], dtype=np.bool_)
    pend = np.nonzero(start & np.uint64(PENDING))[0]
    cache = {}
    for i in pend:
        tid = int(start[i]) & TXN_MASK
        r = cache.get(tid)
        if r is None:
            t = txns.get(tid)
            if t is None or t.state == TxnState.ABORTED:
                r = (0, 2)
            elif t.state == TxnState.COMMITTED:
                r = (t.commit_time, 1)
            else:
                r = (0, 0)
            cache[tid] = r
        ct, kind = r
        if kind == 1:
            out[i] = ct
        elif kind == 2:
            aborted[i] = True
        else:
            final[i] = False
    return out, final, aborted


def plan_batch(table, rng, column=None):
    """Largest mergeable run after the range's (or column's) TPS, or None."""
    frm = (rng.tps[column] if column is not None else max(rng.tps)) + 1
    w = rng.written_seq
    if w < frm or rng.insert_merged == 0:
        return None
    v = TailView(table, rng, frm, w, [], partial=True)
    _, final, _ = resolve_starts(table.txns, v.start)
    off = v.base.astype(np.int64) - rng.lo
    ok = v.present & final & (off < rng.insert_merged)
    bad = np.nonzero(~ok)[0]
    n = int(bad[0]) if bad.size else ok.shape[0]
    if n == 0:
        return None
    cols = frozenset([column]) if column is not None else frozenset(table.all_cols)
    return MergeBatch(rng.range_id, frm, frm + n - 1, cols)


def _base_arrays(table, rng, col, n):
    cap = table.base_cap
    out = np.zeros(n, dtype=np.uint64)
    for pno in range((n + cap - 1) // cap):
        p = table.directory.get(("base", col, rng.range_id, pno))
        k = min(cap, n - pno * cap)
        out[pno * cap:pno * cap + k] = p.slots[:k]
    return out


def run_merge(table, rng, batch, install=True):
    """Apply ``batch`` to private copies of the base pages; optionally publish them."""
    if len(batch) <= 0:
        raise MergeBatchError("empty batch")
    per_column = len(batch.columns) == 1 and table.cfg.per_column_merge
    cols = sorted(batch.columns)
    if not per_column:
        if any(rng.tps[c] != batch.from_seq - 1 for c in cols):
            raise MergeBatchError("batch does not continue the range's lineage")
    elif rng.tps[cols[0]] != batch.from_seq - 1:
        raise MergeBatchError("batch does not continue the column's lineage")
    im = rng.insert_merged
    v = TailView(table, rng, batch.from_seq, batch.to_seq, cols)
    starts, final, aborted = resolve_starts(table.txns, v.start)
    if not final.all() or not v.present.all():
        raise MergeBatchError("batch contains unfinished records")
    t_off = (v.base - np.uint64(rng.lo)).astype(np.int64)
    if (t_off >= im).any():
        raise MergeBatchError("batch reaches into the insert range")
    value_rec = (v.enc & _SNAP) == 0
    valid = value_rec & ~aborted

    data = np.stack([_base_arrays(table, rng, c, im) for c in cols]) if cols else np.zeros((0, im), np.uint64)
    schema = _base_arrays(table, rng, table.SCHEMA, im)
    lut = _base_arrays(table, rng, table.LAST_UPDATED, im)
    deleted = ((schema & _DELETED) != 0).astype(np.uint8)
    schema &= ~_DELETED
    nrec = len(v.enc)
    no_vals = np.zeros((0, nrec), np.uint64)
    if per_column or not table.cfg.cumulative:
        # latest record carrying each column wins for that column
        applied = 0
        for i, c in enumerate(cols):
            has_c = (v.enc & np.uint64(1 << c)) != 0
            vm = (valid & (has_c | (v.enc == 0))).astype(np.uint8)
            one = np.where(has_c, np.uint64(1), np.uint64(0))
            applied = max(applied, _accel.merge_apply(
                data[i:i + 1], np.zeros(im, np.uint64), np.zeros(im, np.uint64),
                np.zeros(im, np.uint8), t_off, vm, one, starts, v.vals[i:i + 1]))
        meta_from = max(rng.tps) if per_column else batch.from_seq - 1
        mvalid = valid & (np.arange(batch.from_seq, batch.to_seq + 1) > meta_from)
        applied = _accel.merge_apply(np.zeros((0, im), np.uint64), schema, lut, deleted, t_off,
                                     mvalid.astype(np.uint8), v.enc & _COLS, starts, no_vals)
        meta_changed = bool(mvalid.any())
    else:
        applied = _accel.merge_apply(data, schema, lut, deleted, t_off, valid.astype(np.uint8),
                                     v.enc & _COLS, starts, v.vals)
        meta_changed = bool(valid.any())
    schema |= deleted.astype(np.uint64) * _DELETED

    tps = batch.to_seq
    pages = {}
    cap = table.base_cap
    npages = (im + cap - 1) // cap
    compress = table.cfg.compress_pages
    d = table.directory
    rid = rng.range_id

    def emit(col, arr, new_tps):
        for pno in range(npages):
            lo, hi = pno * cap, min(im, (pno + 1) * cap)
            pages[("base", col, rid, pno)] = Page.sealed_from(PageKind.MERGED, col, rid, arr[lo:hi],
                                                              new_tps, compress)

    new_meta_tps = max(max(rng.tps), tps)
    for i, c in enumerate(cols):
        emit(c, data[i], tps)
    groups = None
    if not per_column and cols == table.all_cols:
        groups = {}
        for pno in range(npages):
            lo, hi = pno * cap, min(im, (pno + 1) * cap)
            groups[pno] = BaseGroup(data[:, lo:hi], tps, pages[("base", cols[0], rid, pno)])
    if not per_column:
        for c in table.all_cols:
            if c not in batch.columns:
                for pno in range(npages):
                    pages[("base", c, rid, pno)] = d.get(("base", c, rid, pno)).restamp(tps)
    if meta_changed or not per_column:
        emit(table.SCHEMA, schema, new_meta_tps)
        emit(table.LAST_UPDATED, lut, new_meta_tps)
        for pno in range(npages):
            pages[("base", table.START, rid, pno)] = d.get(("base", table.START, rid, pno)).restamp(new_meta_tps)
    res = MergeResult(batch, pages, tps, int(applied), len(batch), groups)
    if install:
        publish(table, rng, res)
    return res


def publish(table, rng, res):
    d = table.directory
    old = []
    if res.groups is None:
        # readers fall back to per-page reads (and per-page TPS checks)
        for key in res.pages:
            if key[1] < table.num_columns:
                rng.bgroups.pop(key[3], None)
    for key, page in res.pages.items():
        old.append(d.swap(key, page))
    if res.groups is not None:
        rng.bgroups.update(res.groups)
    if table.cfg.per_column_merge and len(res.batch.columns) == 1:
        c = next(iter(res.batch.columns))
        rng.tps[c] = res.tps
    else:
        for c in res.batch.columns:
            rng.tps[c] = res.tps
    rng.reset_mark = rng.min_tps()
    rng.planned_to = max(rng.planned_to, res.tps)
    rng.merges += 1
    db = table.db
    db.epoch.retire([p for p in old if p not in res.pages.values()], db.clock.now())
    if db.wal is not None:
        db.wal.log_merge(table.table_id, rng.range_id, res.batch.from_seq, res.batch.to_seq,
                         sorted(res.batch.columns))
    return old


def merge_inserts(table, rng, upto=None):
    """Move committed rows of the insert range into base pages. Returns rows merged."""
    im = rng.insert_merged
    span = rng.span
    ir_id, row0 = divmod(rng.lo, table.insert_span)
    d = table.directory
    start = np.zeros(span - im, dtype=np.uint64)
    present = np.zeros(span - im, dtype=np.bool_)
    for pno in range((row0 + im) // TS, (row0 + span - 1) // TS + 1):
        p = d.get(("itail", table.START, ir_id, pno))
        if p is None:
            break
        a, b = max(row0 + im, pno * TS), min(row0 + span, (pno + 1) * TS)
        start[a - row0 - im:b - row0 - im] = p.slots[a - pno * TS:b - pno * TS]
        present[a - row0 - im:b - row0 - im] = p.present[a - pno * TS:b - pno * TS]
    resolved, final, aborted = resolve_starts(table.txns, start)
    ok = present & final
    bad = np.nonzero(~ok)[0]
    n = int(bad[0]) if bad.size else ok.shape[0]
    if upto is not None:
        n = min(n, upto - im)
    if n <= 0:
        return 0
    resolved[:n][aborted[:n]] = np.uint64(PENDING - 1)
    new_im = im + n

    def itail_rows(col):
        out = np.zeros(n, dtype=np.uint64)
        for pno in range((row0 + im) // TS, (row0 + new_im - 1) // TS + 1):
            p = d.get(("itail", col, ir_id, pno))
            a, b = max(row0 + im, pno * TS), min(row0 + new_im, (pno + 1) * TS)
            out[a - row0 - im:b - row0 - im] = p.slots[a - pno * TS:b - pno * TS]
        return out

    cap = table.base_cap
    rid = rng.range_id
    old_pages = []
    min_tps = rng.min_tps()
    compress = table.cfg.compress_pages
    pnos = range(im // cap, (new_im - 1) // cap + 1)
    blocks = {pno: np.zeros((table.num_columns, min(new_im, (pno + 1) * cap) - pno * cap), dtype=np.uint64)
              for pno in pnos}
    first = {}
    for pno in pnos:
        rng.bgroups.pop(pno, None)
    for col in table.all_cols + [table.SCHEMA, table.START, table.LAST_UPDATED]:
        if col < table.num_columns:
            fresh, tps = itail_rows(col), rng.tps[col]
        elif col == table.SCHEMA:
            fresh, tps = np.zeros(n, dtype=np.uint64), min_tps
        else:
            fresh, tps = resolved[:n], min_tps
        for pno in pnos:
            lo, hi = pno * cap, min(new_im, (pno + 1) * cap)
            key = ("base", col, rid, pno)
            cur = d.get(key)
            arr = blocks[pno][col] if col < table.num_columns else np.zeros(hi - lo, dtype=np.uint64)
            keep = max(0, min(im, hi) - lo)
            if keep:
                arr[:keep] = cur.slots[:keep]
            arr[keep:] = fresh[lo + keep - im:hi - im]
            page = Page.sealed_from(PageKind.BASE, col, rid, arr, tps, compress)
            first.setdefault(pno, page)
            if cur is None:
                d.install(key, page)
            else:
                old_pages.append(d.swap(key, page))
    for pno in pnos:
        rng.bgroups[pno] = BaseGroup(blocks[pno], min(rng.tps), first[pno])
    rng.insert_merged = new_im
    db = table.db
    if old_pages:
        db.epoch.retire(old_pages, db.clock.now())
    if db.wal is not None:
        db.wal.log_merge(table.table_id, rid, -1, new_im, [])
    _maybe_drop_insert_tail(table, ir_id)
    return n


def _maybe_drop_insert_tail(table, ir_id):
    ir = table.insert_ranges[ir_id]
    if ir.merged or ir.next < ir.span or any(r.insert_merged < r.span for r in ir.ranges):
        return
    ir.merged = True
    d = table.directory
    keys = [k for k in d.keys() if k[0] == "itail" and k[2] == ir_id]

    def drop():
        # a reader that sampled insert_merged before the merge may still look here
        for k in keys:
            p = d.remove(k)
            if p is not None:
                p.free()

    table.db.epoch.retire([], table.db.clock.now(), on_free=drop)


class MergeStats:
    def __init__(self):
        self.merges = 0
        self.insert_merges = 0
        self.consolidated = 0
        self.latency = 0.0
        self.compressions = 0

    def as_dict(self, epoch=None):
        out = {
            "merges": self.merges,
            "insert_merges": self.insert_merges,
            "tail_records_consolidated": self.consolidated,
            "mean_merge_ms": 1000 * self.latency / self.merges if self.merges else 0.0,
            "compressions": self.compressions,
        }
        if epoch is not None:
            out["dealloc_backlog"] = epoch.backlog
        return out


class Merger:
    """FIFO merge queue with an optional background worker thread."""

    def __init__(self, db, background=False):
        self.db = db
        self.background = background
        self.stats = MergeStats()
        self._q = queue.Queue()
        self._queued = set()
        self._qlock = threading.Lock()
        self._thread = None
        self._stop = False
        self._lock = threading.Lock()  # one merge at a time
        self.paused = threading.Event()
        self.paused.set()

    def request(self, table, group):
        with self._qlock:
            k = (table.table_id, group)
            if k in self._queued:
                return
            self._queued.add(k)
        self._q.put((table, group))
        if not self.background:
            return

    def start(self):
        if self._thread is None:
            self._stop = False
            self._thread = threading.Thread(target=self._loop, name="lstore-merge", daemon=True)
            self._thread.start()

    def stop(self):
        if self._thread is not None:
            self._stop = True
            self._q.put(None)
            self._thread.join()
            self._thread = None

    def _loop(self):
        while not self._stop:
            item = self._q.get()
            if item is None:
                continue
            self.paused.wait()
            self._process(*item)

    def _process(self, table, group):
        with self._qlock:
            self._queued.discard((table.table_id, group))
        g = table.cfg.merge_group
        for rng in table.ranges[group * g:(group + 1) * g]:
            self.merge_range(table, rng)
        self.db.epoch.advance()

    def drain(self):
        """Process everything queued on the calling thread."""
        while True:
            try:
                item = self._q.get_nowait()
            except queue.Empty:
                return
            if item is not None:
                self._process(*item)

    def merge_range(self, table, rng, column=None):
        """Insert-merge pending rows, then merge every committed record. Returns merges run."""
        with self._lock:
            n = 0
            if rng.insert_merged < rng.span:
                if merge_inserts(table, rng):
                    self.stats.insert_merges += 1
            batch = plan_batch(table, rng, column if table.cfg.per_column_merge else None)
            if batch is None:
                return 0
            t0 = time.perf_counter()
            run_merge(table, rng, batch)
            self.stats.latency += time.perf_counter() - t0
            self.stats.merges += 1
            self.stats.consolidated += len(batch)
            n += 1
            k = table.cfg.compress_every
            if k and rng.merges % k == 0:
                from .historic import compress_range
                if compress_range(table, rng):
                    self.stats.compressions += 1
            return n

    def merge_table(self, table):
        n = 0
        for rng in list(table.ranges):
            if table.cfg.per_column_merge:
                for c in table.all_cols:
                    n += self.merge_range(table, rng, c)
            else:
                n += self.merge_range(table, rng)
        self.db.epoch.advance()
        return n
