"""Logical record layer: inserts, updates, deletes and versioned reads.

Column ids for a table with ``n`` data columns::

    0 .. n-1   data columns
    n          SchemaEncoding
    n+1        StartTime
    n+2        LastUpdatedTime   (base/merged pages only)
    n+3        Indirection       (tail back links; base forward links live in a CasArray)
    n+4        BaseRid           (tail only)
    n+5        cumulation base   (tail only; reset watermark when the record was written)
"""

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import (
    ConfigError,
    DuplicateKey,
    IllegalTransition,
    PoisonedRead,
    UnknownRecord,
    WriteOnceViolation,
    WriteWriteConflict,
)
from .index import IndexUpdate, PrimaryIndex, SecondaryIndex
from .page_store import (
    BASE_PAGE_SLOTS,
    LATCH_BIT,
    LINK_MASK,
    NULL_LINK,
    POISON,
    TAIL_FLOOR,
    TAIL_PAGE_SLOTS,
    TAIL_TAG,
    Page,
    PageKind,
    TailGroup,
    decode_link,
    encode_link,
)
from .txn import DEAD, INVISIBLE, PENDING, TXN_MASK, VISIBLE, Isolation, Snap, TxnState

MAX_COLUMNS = 60
SNAPSHOT_FLAG = 1 << 63  # tail SchemaEncoding: record holds pre-update originals
DELETED_FLAG = 1 << 62  # merged SchemaEncoding: row deleted as of LastUpdatedTime
ABSENT = PENDING - 1  # StartTime of a row whose insert aborted; never visible
COL_MASK = (1 << MAX_COLUMNS) - 1
TS = TAIL_PAGE_SLOTS


@dataclass
class TableConfig:
    range_size: int = 1 << 12
    insert_range_size: int = 1 << 16
    tail_block: int = 1 << 12
    merge_group: int = 16  # update ranges per merge group (2^16 RIDs by default)
    merge_threshold: float = 0.5  # fraction of the merge group span
    per_column_merge: bool = False
    cumulative: bool = True
    compress_every: int = 4
    compress_pages: bool = True
    track_hops: bool = False
    first_committer_wins: bool = True

    def validate(self):
        rs = self.range_size
        if rs < 256 or rs > (1 << 20) or rs & (rs - 1):
            raise ConfigError("range_size must be a power of two in [2^8, 2^20]")
        if self.insert_range_size < rs or self.insert_range_size % rs:
            raise ConfigError("insert_range_size must be a multiple of range_size")
        if not 0 < self.merge_threshold <= 1:
            raise ConfigError("merge_threshold must be in (0, 1]")
        if self.merge_group < 1 or self.tail_block < 1:
            raise ConfigError("merge_group and tail_block must be positive")
        return self


@dataclass
class RecordVersion:
    rid: object
    schema_encoding: int
    start_time: int
    values: dict
    indirection: object = None
    hops: int = 0


class TailMeta:
    __slots__ = ("seq", "rid", "enc", "start", "back", "base", "cb", "spage", "slot", "pno", "row")


@dataclass
class InsertRange:
    insert_id: int
    lo: int
    span: int
    tail_hi: int
    ranges: list
    next: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)
    merged: bool = False
    iv: dict = None

    def tail_rid(self, rid):
        return self.tail_hi - (rid - self.lo)


LATCH_WAIT_S = 0.05


def latch_cell(cells, off, wait=LATCH_WAIT_S):
    """Set the latch bit on one indirection cell; returns the unlatched value.

    The bit is a short-term latch, not a lock: a writer that finds it set
    yields and retries, and gives up (None) only after ``wait`` seconds.
    """
    cell = cells.load(off)
    if not cell & LATCH_BIT and cells.cas(off, cell, cell | LATCH_BIT):
        return cell
    deadline = time.monotonic() + wait
    while time.monotonic() < deadline:
        time.sleep(0)
        cell = cells.load(off)
        if not cell & LATCH_BIT and cells.cas(off, cell, cell | LATCH_BIT):
            return cell
    return None


def bits(mask):
    out = []
    c = 0
    while mask:
        if mask & 1:
            out.append(c)
        mask >>= 1
        c += 1
    return out


class Table:
    def __init__(self, db, table_id, num_columns, key_column=0, config=None, name=None, bootstrap=True):
        if not 1 <= num_columns <= MAX_COLUMNS:
            raise ConfigError(f"num_columns must be in [1, {MAX_COLUMNS}]")
        if not 0 <= key_column < num_columns:
            raise ConfigError("key_column out of range")
        self.db = db
        self.table_id = table_id
        self.name = name or f"t{table_id}"
        self.num_columns = n = num_columns
        self.key_column = key_column
        self.cfg = (config or TableConfig()).validate()
        self.SCHEMA, self.START, self.LAST_UPDATED = n, n + 1, n + 2
        self.INDIRECTION, self.BASE_RID, self.CUM_BASE = n + 3, n + 4, n + 5
        self.all_cols = list(range(n))
        self.full_mask = (1 << n) - 1
        self.range_size = self.cfg.range_size
        self._range_shift = self.range_size.bit_length() - 1
        self.base_cap = min(BASE_PAGE_SLOTS, self.range_size)
        self.insert_span = self.cfg.insert_range_size
        self.directory = db.store.directory(table_id)
        self.txns = db.txns.table
        self.ranges = []
        self.insert_ranges = []
        self._ir_lock = threading.Lock()
        self.primary = PrimaryIndex()
        self.secondary = {}
        self.hops = np.zeros(16, dtype=np.int64)
        self.consistency_checks = 0
        self._pcm = self.cfg.per_column_merge
        self.consistency_mismatches = 0
        self._hop_lock = threading.Lock()
        self._group_pending = {}
        self._group_lock = threading.Lock()
        if bootstrap:
            self._new_insert_range()

    # ------------------------------------------------------------------
    # layout helpers
    # ------------------------------------------------------------------

    def _new_insert_range(self, tail_hi=None):
        store = self.db.store
        m = self.insert_span // self.range_size
        rngs = [store.allocate_update_range(self.table_id, self.range_size, self.num_columns)
                for _ in range(m)]
        if tail_hi is None:
            tail_hi = store.allocate_tail_rids(None, self.insert_span, first_seq=1).hi
        else:
            store._tail_cursor = min(store._tail_cursor, tail_hi - self.insert_span)
        ir = InsertRange(len(self.insert_ranges), rngs[0].lo, self.insert_span, tail_hi, rngs)
        d = self.directory
        ir.iv = d.view("itail", ir.insert_id)
        for r in rngs:
            r.tv = d.view("tail", r.range_id)
            r.bv = d.view("base", r.range_id)
            r.bgroups = {}
        self.ranges.extend(rngs)
        self.insert_ranges.append(ir)
        if self.db.wal is not None:
            self.db.wal.log_directory(self.table_id, "insert_range", ir.insert_id, ir.lo, tail_hi)
        return ir

    def range_of(self, rid):
        i = rid >> self._range_shift
        if rid < 0 or rid >= TAIL_FLOOR or i >= len(self.ranges):
            raise UnknownRecord(rid)
        return self.ranges[i]

    def merge_group_of(self, rng):
        return rng.range_id // self.cfg.merge_group

    def _page(self, kind, col, rid_or_range, pno):
        return self.directory.get((kind, col, rid_or_range, pno))

    def _read_page(self, page, slot):
        if page.freed:
            POISON.hit()
            raise PoisonedRead(repr(page))
        return page.slots.item(slot)

    def base_cell(self, rng, off, col):
        """Current base/merged cell, or None when the row does not exist yet."""
        if off < rng.insert_merged:
            return self._read_page(rng.bv[off // self.base_cap][col], off % self.base_cap)
        return self._itail_cell(rng.lo + off, col)

    def _itail_cell(self, rid, col):
        ir_id, row = divmod(rid, self.insert_span)
        prow = self.insert_ranges[ir_id].iv.get(row // TS)
        p = None if prow is None else prow[col]
        if p is None:
            return None
        s = row % TS
        if not p.present[s]:
            return None
        return self._read_page(p, s)

    def _base_page(self, rng, col, off):
        return rng.bv[off // self.base_cap][col]

    def _base_start(self, rng, off):
        """(cell, page, slot) for the row's StartTime; cell None if never inserted."""
        if off < rng.insert_merged:
            p = rng.bv[off // self.base_cap][self.START]
            s = off % self.base_cap
            return self._read_page(p, s), p, s
        ir_id, row = divmod(rng.lo + off, self.insert_span)
        prow = self.insert_ranges[ir_id].iv.get(row // TS)
        p = None if prow is None else prow[self.START]
        s = row % TS
        if p is None or not p.present[s]:
            return None, None, None
        return self._read_page(p, s), p, s

    def _vis(self, cell, page, slot, snap):
        if not cell & PENDING:
            return VISIBLE if cell < snap.time else INVISIBLE
        v, t = self.txns.visibility(cell, snap)
        if t is not None and cell & PENDING:
            page.slots[slot] = t  # lazy commit-time swap
        return v

    # ------------------------------------------------------------------
    # tail records
    # ------------------------------------------------------------------

    def tail_meta(self, rng, seq):
        """Meta columns of tail record ``seq``; None when its page is gone (compressed)."""
        pno, slot = divmod(seq - 1, TS)
        row = rng.tv.get(pno)
        if row is None:
            return None
        sp = row[self.SCHEMA]
        if sp is None or not sp.present[slot]:
            return None
        if sp.freed:
            POISON.hit()
            raise PoisonedRead(repr(sp))
        rec = sp.group.vals[:, slot].tolist()
        m = TailMeta()
        m.seq = seq
        m.rid = rng.rid_of(seq)
        m.enc = rec[self.SCHEMA]
        m.spage = row[self.START]
        m.slot = slot
        m.pno = pno
        m.row = rec
        m.start = rec[self.START]
        m.back = decode_link(rec[self.INDIRECTION])
        m.cb = rec[self.CUM_BASE]
        m.base = rec[self.BASE_RID]
        return m

    def tail_value(self, rng, seq, col):
        pno, slot = divmod(seq - 1, TS)
        row = rng.tv.get(pno)
        p = None if row is None else row[col]
        if p is None:
            return None
        return self._read_page(p, slot)

    def tail_base_rid(self, rng, seq):
        return self.tail_value(rng, seq, self.BASE_RID)

    def _tail_page(self, rng, col, pno):
        row = rng.tv.get(pno)
        if row is None or row[self.SCHEMA] is None:
            row = self._tail_row(rng, pno)
        return row[col]

    def _tail_row(self, rng, pno):
        """Create (once) every tail page of one page number, backed by one group."""
        with rng.append_lock:
            row = rng.tv.get(pno)
            if row is not None and row[self.SCHEMA] is not None:
                return row
            g = TailGroup(self.CUM_BASE + 1, TS)
            for c in self._meta_and(self.all_cols):
                if row is None or row[c] is None:
                    self.directory.install(("tail", c, rng.range_id, pno), g.page(c, rng.range_id))
                row = rng.tv[pno]
            return row

    def append_records(self, rng, recs, ctx=None):
        """Append tail records; ``recs`` is a list of (enc, start, back, base_rid, cb, values).

        ``back`` None links to the previous record of the same call.
        Returns [(rid, seq), ...].

        Slots come from an atomic per-range counter; the range lock is taken
        only to add RID blocks or pages. A record counts as present once its
        SchemaEncoding cell lands, which happens last.
        """
        wal = self.db.wal
        store = self.db.store
        plan = []
        for _ in recs:
            seq = rng.reserve_seq()
            if seq > rng.covered():
                with rng.append_lock:
                    while seq > rng.covered():
                        blk = store.allocate_tail_rids(rng, self.cfg.tail_block)
                        if wal is not None:
                            wal.log_directory(self.table_id, "tail_block", rng.range_id, blk.first_seq,
                                              blk.hi, blk.count)
            pno = (seq - 1) // TS
            row = rng.tv.get(pno)
            if row is None or row[self.SCHEMA] is None:
                self._tail_row(rng, pno)
            plan.append((seq, rng.rid_of(seq)))
        out = []
        prev = None
        for (seq, rid), (enc, start, back, base_rid, cb, vals) in zip(plan, recs):
            if back is None:
                back = prev
            pno, slot = divmod(seq - 1, TS)
            row = rng.tv[pno]
            if wal is None:
                # the slot is ours alone (reserved above), so no page latch is needed
                cells = list(vals.items())
                cells += ((self.BASE_RID, base_rid), (self.CUM_BASE, cb),
                          (self.INDIRECTION, encode_link(back)), (self.START, start),
                          (self.SCHEMA, enc))  # SchemaEncoding last: present means complete
                for c, v in cells:
                    p = row[c]
                    if p.present[slot]:
                        raise WriteOnceViolation(f"tail slot {seq} of range {rng.range_id} already written")
                    p.slots[slot] = v
                    p.present[slot] = True
            else:
                cells = list(vals.items())
                cells += [(self.BASE_RID, base_rid), (self.CUM_BASE, cb),
                          (self.INDIRECTION, encode_link(back)), (self.START, start),
                          (self.SCHEMA, enc)]
                pages = [row[c] for c, _ in cells]
                held = wal.relay_begin(pages)
                lsn = wal.log_tail(self.table_id, rng.range_id, seq, rid, base_rid, enc, start,
                                   back, cb, vals, ctx)
                for (c, v), p in zip(cells, pages):
                    p.write_at(slot, v)
                wal.relay_end(held, lsn)
            prev = rid
            out.append((rid, seq))
        self._note_appends(rng, len(recs))
        return out

    def _meta_and(self, cols):
        # SchemaEncoding last: its page existing means the whole row of pages does
        return list(cols) + [self.START, self.INDIRECTION, self.BASE_RID, self.CUM_BASE, self.SCHEMA]

    def _note_appends(self, rng, n):
        merger = self.db.merger
        if merger is None:
            return
        g = self.merge_group_of(rng)
        with self._group_lock:
            c = self._group_pending.get(g, 0) + n
            limit = self.cfg.merge_threshold * self.range_size * self.cfg.merge_group
            fire = c >= limit
            self._group_pending[g] = 0 if fire else c
        if fire:
            merger.request(self, g)

    # ------------------------------------------------------------------
    # insert
    # ------------------------------------------------------------------

    def insert(self, ctx, values):
        if ctx.state != TxnState.ACTIVE:
            raise IllegalTransition("insert needs an active transaction")
        if len(values) != self.num_columns:
            raise ValueError(f"expected {self.num_columns} values")
        key = values[self.key_column]
        if self.primary.get(key) is not None:
            raise DuplicateKey(key)
        rid = self._reserve_rid()
        try:
            self.primary.reserve(key, rid)
        except DuplicateKey:
            self._write_row(rid, values, ABSENT, None)
            raise
        self._write_row(rid, values, ctx.pending_mark, ctx)
        ctx.inserts.append((self, rid, key))
        for c, idx in self.secondary.items():
            idx.add(values[c], rid)
            ctx.index_ops.append(IndexUpdate(self, idx, rid, None, values[c]))
        return rid

    def _reserve_rid(self):
        while True:
            ir = self.insert_ranges[-1]
            with ir.lock:
                if ir.next < ir.span:
                    pos = ir.next
                    ir.next += 1
                    return ir.lo + pos
            with self._ir_lock:
                if self.insert_ranges[-1] is ir:
                    self._new_insert_range()

    def _write_row(self, rid, values, start, ctx):
        ir_id, row = divmod(rid, self.insert_span)
        pno, slot = divmod(row, TS)
        cells = list(enumerate(values)) + [(self.START, start)]
        pages = [self._itail_page(c, ir_id, pno) for c, _ in cells]
        wal = self.db.wal
        if wal is None:
            for (c, v), p in zip(cells, pages):
                p.write_at(slot, v)
            return
        held = wal.relay_begin(pages)
        lsn = wal.log_insert(self.table_id, rid, values, start, ctx)
        for (c, v), p in zip(cells, pages):
            p.write_at(slot, v)
        wal.relay_end(held, lsn)

    def _itail_page(self, col, ir_id, pno):
        key = ("itail", col, ir_id, pno)
        p = self.directory.get(key)
        if p is None:
            with self._ir_lock:
                p = self.directory.get(key)
                if p is None:
                    p = Page(PageKind.TAIL, col, ir_id, TS)
                    self.directory.install(key, p)
        return p

    def rollback_insert(self, rid, key):
        self.primary.release(key, rid)

    # ------------------------------------------------------------------
    # update / delete
    # ------------------------------------------------------------------

    def update(self, ctx, rid, values):
        """values: {column: new value}. Returns the new tail RID."""
        if not values:
            raise ValueError("empty update")
        for c in values:
            if not 0 <= c < self.num_columns:
                raise ValueError(f"bad column {c}")
        if self.key_column in values:
            raise ValueError("updating the primary key is not supported")
        return self._write(ctx, rid, values, False)

    def delete(self, ctx, rid):
        return self._write(ctx, rid, None, True)

    def _conflict(self, ctx, msg):
        if ctx.state == TxnState.ACTIVE:
            self.db.txns.abort(ctx)
        raise WriteWriteConflict(msg)

    def _write(self, ctx, rid, upd, delete):
        if ctx.state != TxnState.ACTIVE:
            raise IllegalTransition("write needs an active transaction")
        rng = self.range_of(rid)
        off = rid - rng.lo
        cells = rng.indirection
        cell = latch_cell(cells, off)
        if cell is None:
            self._conflict(ctx, f"record {rid} is latched")
        try:
            link = decode_link(cell)
            prev = self._prev_value(rng, off, link, ctx)
            if prev == "deleted":
                raise UnknownRecord(rid)
            if prev is None or prev == "hist":
                bstart, _, _ = self._base_start(rng, off)
                if bstart is None or bstart == ABSENT:
                    raise UnknownRecord(rid)
                if bstart & PENDING and (bstart & TXN_MASK) != ctx.txn_id:
                    t = self.txns.get(bstart & TXN_MASK)
                    if t is None or t.state == TxnState.ABORTED:
                        raise UnknownRecord(rid)
                    if t.state != TxnState.COMMITTED:
                        raise WriteWriteConflict(f"record {rid} insert is pending")
                    bstart = t.commit_time
                if (self.cfg.first_committer_wins and ctx.isolation != Isolation.READ_COMMITTED
                        and not bstart & PENDING and bstart >= ctx.begin_time):
                    raise WriteWriteConflict(f"record {rid} inserted after snapshot")
            if prev == "hist":
                if off < rng.insert_merged and self.base_cell(rng, off, self.SCHEMA) & DELETED_FLAG:
                    raise UnknownRecord(rid)
            elif prev is not None:
                if prev.enc == 0 and not prev.enc & SNAPSHOT_FLAG:
                    raise UnknownRecord(rid)
                if (self.cfg.first_committer_wins and ctx.isolation != Isolation.READ_COMMITTED
                        and prev.start != ctx.pending_mark):
                    ct = self.txns.resolve(prev.start)
                    if ct is not None and ct >= ctx.begin_time:
                        raise WriteWriteConflict(f"record {rid} changed after snapshot")

            recs = []
            new_mask = 0
            if not delete:
                for c in upd:
                    new_mask |= 1 << c
                first = new_mask & ~rng.snap_taken.item(off)
                if first:
                    bstart_raw, _, _ = self._base_start(rng, off)
                    orig = {c: self.base_cell(rng, off, c) for c in bits(first)}
                    recs.append((first | SNAPSHOT_FLAG, bstart_raw,
                                 link if link is not None else rid, rid, rng.reset_mark, orig))
                carry = 0
                vals = {}
                if (self.cfg.cumulative and isinstance(prev, TailMeta)
                        and prev.seq > rng.reset_mark):
                    carry = prev.enc & COL_MASK & ~new_mask
                    for c in bits(carry):
                        vals[c] = prev.row[c]
                vals.update(upd)
                enc = carry | new_mask
                back = None if first else (link if link is not None else rid)
                olds = self._index_olds(ctx, rng, off, upd)
            else:
                first = 0
                enc = 0
                vals = {}
                back = link if link is not None else rid
                olds = None
            recs.append((enc, ctx.pending_mark, back, rid, rng.reset_mark, vals))
            written = self.append_records(rng, recs, ctx)
        except BaseException as e:
            cells.cas(off, cell | LATCH_BIT, cell)
            if isinstance(e, WriteWriteConflict):
                self._conflict(ctx, str(e))
            raise
        new_rid = written[-1][0]
        if first:
            rng.snap_taken[off] |= np.uint64(first)
        # an abort rolls the link back to our snapshot record (it must stay in the chain)
        target = encode_link(written[0][0]) if first else cell
        cells.cas(off, cell | LATCH_BIT, encode_link(new_rid))
        ctx.writeset.append((self, rng, off, new_rid, target))
        if olds:
            for c, old in olds.items():
                idx = self.secondary[c]
                idx.add(upd[c], rid)
                ctx.index_ops.append(IndexUpdate(self, idx, rid, old, upd[c]))
        return new_rid

    def _index_olds(self, ctx, rng, off, upd):
        cols = [c for c in upd if c in self.secondary]
        if not cols:
            return None
        got = self._read(rng, off, Snap(self.db.clock.now() + 1, ctx.txn_id), cols, count=False)
        if got is None:
            return None
        return dict(zip(cols, got[1]))

    def _prev_value(self, rng, off, link, ctx):
        """Latest non-snapshot, non-aborted record in the chain.

        Returns a TailMeta, None (chain reaches the base), "hist" (older than the
        compressed horizon) or raises on a live competitor.
        """
        r = link
        while r is not None and r >= TAIL_FLOOR:
            seq = rng.seq_of(r)
            m = None if seq <= rng.hist_upto else self.tail_meta(rng, seq)
            if m is None:
                return "hist"
            if m.enc & SNAPSHOT_FLAG:
                r = m.back
                continue
            st = m.start
            if st & PENDING:
                tid = st & TXN_MASK
                if tid != ctx.txn_id:
                    t = self.txns.get(tid)
                    if t is not None and t.state in (TxnState.ACTIVE, TxnState.PRECOMMIT):
                        raise WriteWriteConflict(f"record {rng.lo + off} has a pending writer")
                    if t is None or t.state == TxnState.ABORTED:
                        r = m.back
                        continue
            return m
        return None

    def rollback_link(self, rng, off, new_rid, target_cell):
        # only if nobody replaced it; otherwise the aborted record stays as a tombstone
        rng.indirection.cas(off, encode_link(new_rid), target_cell)

    # ------------------------------------------------------------------
    # reads
    # ------------------------------------------------------------------

    def _count(self, hops):
        if self.cfg.track_hops:
            with self._hop_lock:
                self.hops[min(hops, 15)] += 1

    def _read(self, rng, off, snap, cols, count=True):
        """Resolve the version of row ``off`` visible to ``snap``.

        Returns (visible_token, [values for cols], start_time, encoding) or None.
        """
        words = rng.indirection.words
        raw = words.item(off) & LINK_MASK
        while True:
            out = self._read_at(rng, off, snap, cols, count, raw)
            # a merge may have folded in records installed after we sampled the
            # link; if the cell moved, those pages can be ahead of our view
            now = words.item(off) & LINK_MASK
            if now == raw:
                return out
            raw = now

    def _read_at(self, rng, off, snap, cols, count, raw):
        link = decode_link(raw)
        if self._pcm and len(cols) > 1 and off < rng.insert_merged:
            # columns merged separately may disagree; reconcile through the tail chain
            if not self._check_consistency(rng, off, cols) and link is not None:
                return self._walk(rng, off, link, snap, cols, count)
        if link is None:
            start, sp, ss = self._base_start(rng, off)
            if start is None or self._vis(start, sp, ss, snap) != VISIBLE:
                return None
            if off < rng.insert_merged:
                if self.base_cell(rng, off, self.SCHEMA) & DELETED_FLAG:
                    return None
                bg = rng.bgroups.get(off // self.base_cap)
                if bg is not None:
                    if bg.page.freed:
                        POISON.hit()
                        raise PoisonedRead(repr(bg.page))
                    brec = bg.vals[:, off % self.base_cap].tolist()
                    if count:
                        self._count(1)
                    return rng.lo + off, [brec[c] for c in cols], start, 0
            if count:
                self._count(1)
            return rng.lo + off, [self.base_cell(rng, off, c) for c in cols], start, 0
        seq = rng.seq_of(link)
        if seq > rng.hist_upto:
            # fast path: the newest record is visible and, being cumulative, covers
            # every updated column; the rest come from a merged page that already
            # reflects everything the record's predecessors changed
            pno, slot = divmod(seq - 1, TS)
            row = rng.tv.get(pno)
            sp = None if row is None else row[self.SCHEMA]
            if sp is not None and sp.present[slot]:
                if sp.freed:
                    POISON.hit()
                    raise PoisonedRead(repr(sp))
                rec = sp.group.vals[:, slot].tolist()
                enc = rec[self.SCHEMA]
                if not enc & SNAPSHOT_FLAG:
                    start = rec[self.START]
                    if self._vis(start, row[self.START], slot, snap) == VISIBLE:
                        if enc == 0:
                            if count:
                                self._count(2)
                            return None
                        out = []
                        merged = off < rng.insert_merged
                        if merged:
                            cb = rec[self.CUM_BASE]
                            cap = self.base_cap
                            pno = off // cap
                            bs = off % cap
                            bg = rng.bgroups.get(pno)
                            if bg is not None and bg.tps >= cb:
                                if bg.page.freed:
                                    POISON.hit()
                                    raise PoisonedRead(repr(bg.page))
                                brec = bg.vals[:, bs].tolist()
                                if count:
                                    self._count(2)
                                return link, [rec[c] if enc >> c & 1 else brec[c] for c in cols], start, enc
                            brow = rng.bv[pno]
                        for c in cols:
                            if enc >> c & 1:
                                out.append(rec[c])
                            elif not merged:
                                out.append(self._itail_cell(rng.lo + off, c))
                            else:
                                p = brow[c]
                                if p.tps < cb:
                                    break
                                if p.freed:
                                    POISON.hit()
                                    raise PoisonedRead(repr(p))
                                out.append(p.slots.item(bs))
                        else:
                            if count:
                                self._count(2)
                            return link, out, start, enc
        return self._walk(rng, off, link, snap, cols, count)

    def _check_consistency(self, rng, off, cols):
        from .merge import check_read_consistency
        pages = [self._base_page(rng, c, off) for c in cols]
        ok, _ = check_read_consistency(pages)
        self.consistency_checks += 1
        if not ok:
            self.consistency_mismatches += 1
        return ok

    def _walk(self, rng, off, link, snap, cols, count=True):
        base_rid = rng.lo + off
        need = set(cols)
        resolved = {}
        orig = {}
        found = False
        vis = None
        vstart = None
        venc = 0
        hops = 1
        r = link
        while r is not None and r >= TAIL_FLOOR:
            seq = rng.seq_of(r)
            m = None if seq <= rng.hist_upto else self.tail_meta(rng, seq)
            if m is None:
                hops += 1
                h = self.db.historic_for(self, rng)
                rec = h.get(base_rid) if h is not None else None
                if rec is not None:
                    if not found:
                        got = rec.version_at(snap.time - 1)
                        if got is None:
                            for c, v in rec.originals().items():
                                if c in need:
                                    orig.setdefault(c, v)
                        else:
                            t, enc, vals = got
                            if enc == 0:
                                if count:
                                    self._count(hops)
                                return None
                            found = True
                            vis = ("h", base_rid, t)
                            vstart = t
                            venc = enc
                            for c in list(need):
                                if c in vals:
                                    resolved[c] = vals[c]
                                    need.discard(c)
                    else:
                        for c in list(need):
                            v = rec.latest(c)
                            if v is not None:
                                resolved[c] = v
                                need.discard(c)
                break
            hops += 1
            enc = m.enc
            if enc & SNAPSHOT_FLAG:
                for c in bits(enc & COL_MASK):
                    if c in need:
                        orig[c] = m.row[c]
            else:
                v = self._vis(m.start, m.spage, m.slot, snap)
                if not found:
                    if v == VISIBLE:
                        found = True
                        vis = r
                        vstart = m.start
                        venc = enc
                        if enc == 0:
                            if count:
                                self._count(hops)
                            return None
                        for c in list(need):
                            if enc >> c & 1:
                                resolved[c] = m.row[c]
                                need.discard(c)
                elif v != DEAD:
                    for c in list(need):
                        if enc >> c & 1:
                            resolved[c] = m.row[c]
                            need.discard(c)
                if found and not need:
                    break
            r = m.back
        if not found:
            start, sp, ss = self._base_start(rng, off)
            if start is None or self._vis(start, sp, ss, snap) != VISIBLE:
                if count:
                    self._count(hops)
                return None
            vis = base_rid
            vstart = start
        for c in need:
            resolved[c] = orig[c] if c in orig else self.base_cell(rng, off, c)
        if count:
            self._count(hops)
        return vis, [resolved[c] for c in cols], vstart, venc

    # ------------------------------------------------------------------
    # public read API
    # ------------------------------------------------------------------

    def read(self, ctx, rid, cols=None, speculative=False):
        """Latest version visible to ``ctx``; dict {col: value} or None."""
        if ctx.state != TxnState.ACTIVE:
            raise IllegalTransition("read needs an active transaction")
        cols = self.all_cols if cols is None else list(cols)
        rng = self.range_of(rid)
        snap = self.db.txns.snap_for(ctx, speculative)
        got = self._read(rng, rid - rng.lo, snap, cols)
        tok = got[0] if got is not None else None
        if ctx.isolation == Isolation.SERIALIZABLE and (got is None or got[2] != ctx.pending_mark):
            ctx.readset.append((self, rid, tok, bool(snap.deps)))
        if snap.deps:
            ctx.deps.extend(snap.deps)
        if got is None:
            return None
        return dict(zip(cols, got[1]))

    def speculative_read(self, ctx, rid, cols=None):
        return self.read(ctx, rid, cols, speculative=True)

    def visible_rid(self, rid, snap):
        rng = self.range_of(rid)
        got = self._read(rng, rid - rng.lo, snap, [], count=False)
        return got[0] if got is not None else None

    def select_latest(self, ctx, key, cols=None):
        rid = self.primary.get(key)
        if rid is None:
            return None
        rv = self._version(ctx, rid, self.db.txns.snap_for(ctx), cols)
        if rv is not None:
            ctx.readset.append((self, rid, rv.rid, False))
            if self.key_column in rv.values and rv.values[self.key_column] != key:
                return None
        return rv

    def select_version(self, ctx, rid, as_of, cols=None):
        """Version with the greatest start time <= as_of."""
        if as_of >= ctx.begin_time:
            raise ValueError("as_of must precede the transaction's begin time")
        return self._version(ctx, rid, Snap(as_of + 1), cols)

    def _version(self, ctx, rid, snap, cols):
        cols = self.all_cols if cols is None else list(cols)
        rng = self.range_of(rid)
        got = self._read(rng, rid - rng.lo, snap, cols)
        if got is None:
            return None
        tok, vals, start, enc = got
        start = self.txns.resolve(start) if start & PENDING and (start & TXN_MASK) != ctx.txn_id else start
        return RecordVersion(tok, enc, start, dict(zip(cols, vals)),
                             decode_link(int(rng.indirection.words[rid - rng.lo]) & LINK_MASK))

    def lookup(self, ctx, col, value, cols=None):
        """Rows whose visible value in ``col`` equals ``value`` (index predicate re-checked)."""
        if col == self.key_column:
            rid = self.primary.get(value)
            cands = [] if rid is None else [rid]
        elif col in self.secondary:
            cands = self.secondary[col].lookup(value)
        else:
            raise KeyError(f"no index on column {col}")
        out = []
        want = self.all_cols if cols is None else list(cols)
        for rid in cands:
            rec = self.read(ctx, rid, sorted(set(want) | {col}))
            if rec is not None and rec[col] == value:
                out.append((rid, {c: rec[c] for c in want}))
        return out

    def create_index(self, col):
        if col == self.key_column or col in self.secondary:
            return
        idx = SecondaryIndex(col)
        snap = Snap(self.db.clock.now() + 1)
        for rid in self.live_rids():
            rng = self.range_of(rid)
            got = self._read(rng, rid - rng.lo, snap, [col], count=False)
            if got is not None:
                idx.add(got[1][0], rid)
        self.secondary[col] = idx

    def live_rids(self):
        out = []
        for ir in self.insert_ranges:
            out.extend(range(ir.lo, ir.lo + ir.next))
        return out

    def latest_committed_value(self, rid, col):
        token = object()
        now = self.db.clock.now() + 1
        self.db.epoch.enter(token, now)
        try:
            rng = self.range_of(rid)
            got = self._read(rng, rid - rng.lo, Snap(now), [col], count=False)
            return None if got is None else got[1][0]
        finally:
            self.db.epoch.exit(token)

    # ------------------------------------------------------------------
    # scans
    # ------------------------------------------------------------------

    def scan_sum(self, ctx, col, lo=None, hi=None):
        """SUM(col) over base RIDs [lo, hi) at the transaction's snapshot."""
        snap = self.db.txns.snap_for(ctx)
        return self.scan_sum_snap(snap, col, lo, hi)

    def scan_sum_snap(self, snap, col, lo=None, hi=None):
        end = self.insert_ranges[-1].lo + self.insert_ranges[-1].next
        lo = 0 if lo is None else max(lo, 0)
        hi = end if hi is None else min(hi, end)
        total = 0
        for i in range(lo >> self._range_shift, ((hi - 1) >> self._range_shift) + 1 if hi > lo else 0):
            rng = self.ranges[i]
            a = max(lo, rng.lo) - rng.lo
            b = min(hi, rng.hi) - rng.lo
            total += self._scan_range(rng, snap, col, a, b)
        return total

    def _scan_range(self, rng, snap, col, a, b):
        total = 0
        im = rng.insert_merged
        m_hi = min(b, im)
        if a < m_hi:
            cap = self.base_cap
            words = rng.indirection.words
            for pno in range(a // cap, (m_hi - 1) // cap + 1):
                p0 = pno * cap
                s, e = max(a, p0), min(m_hi, p0 + cap)
                vp = self._base_page(rng, col, s)
                sp = self._base_page(rng, self.START, s)
                lp = self._base_page(rng, self.LAST_UPDATED, s)
                hp = self._base_page(rng, self.SCHEMA, s)
                if vp.freed or sp.freed or lp.freed or hp.freed:
                    POISON.hit()
                    raise PoisonedRead(repr(vp))
                vals = vp.slots[s - p0:e - p0]
                starts = sp.slots[s - p0:e - p0]
                lut = lp.slots[s - p0:e - p0]
                deleted = ((hp.slots[s - p0:e - p0] >> np.uint64(62)) & np.uint64(1)).astype(np.uint8)
                w = words[s:e] & np.uint64(LINK_MASK)
                tagged = (w != np.uint64(NULL_LINK)) & ((w & np.uint64(TAIL_TAG)) != 0)
                rids = np.where(tagged, w | np.uint64(TAIL_FLOOR), np.uint64(0))
                link_seq = rng.seqs_of(rids) if tagged.any() else np.zeros(e - s, dtype=np.uint64)
                part, need = _accel.scan_classify(vals, starts, lut, deleted, link_seq, vp.tps, snap.time)
                # base rows that never became visible are excluded by the kernel via starts
                total += part
                for j in np.nonzero(need)[0]:
                    got = self._read(rng, s + int(j), snap, [col], count=False)
                    if got is not None:
                        total += got[1][0]
        for off in range(max(a, im), b):
            got = self._read(rng, off, snap, [col], count=False)
            if got is not None:
                total += got[1][0]
        return total
