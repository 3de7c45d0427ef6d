"""Redo-only logging, crash recovery and page-LSN ownership relaying.

Log record layout::

    len u32 | lsn u64 | kind u8 | payload (len bytes) | crc32 u32

The checksum covers everything before it. Recovery stops at the first record
that is truncated or fails its checksum.
"""

import json
import struct
import threading
import zlib

import numpy as np

from .page_store import NULL_LINK, TAIL_PAGE_SLOTS, Page, PageKind, TailRidBlock, encode_link
from .sync import RWLatch
from .txn import PENDING, TXN_MASK, TransactionContext, TxnState

TAIL_APPEND = 1
COMMIT = 2
MERGE_OP = 3
DIRECTORY_OP = 4
KIND_NAMES = {TAIL_APPEND: "tail-append", COMMIT: "commit", MERGE_OP: "merge-op",
              DIRECTORY_OP: "directory-op"}

_HEAD = struct.Struct("<IQB")
_CRC = struct.Struct("<I")
# subtype, table, txn, range, seq, rid, base_rid, enc, start, back, cb, nvals
_TAIL = struct.Struct("<BIQqQQQQQQQH")
_INSERT = struct.Struct("<BIQQQH")
_COMMIT = struct.Struct("<QQ")
_MERGE = struct.Struct("<IQqqH")
_CV = struct.Struct("<HQ")

SUB_TAIL = 0
SUB_INSERT = 1


def encode_record(lsn, kind, payload):
    head = _HEAD.pack(len(payload), lsn, kind)
    body = head + payload
    return body + _CRC.pack(zlib.crc32(body))


def parse_log(data):
    """Yield (offset, lsn, kind, payload) for every intact record."""
    off = 0
    n = len(data)
    while off + _HEAD.size + _CRC.size <= n:
        ln, lsn, kind = _HEAD.unpack_from(data, off)
        end = off + _HEAD.size + ln
        if end + _CRC.size > n:
            return
        body = bytes(data[off:end])
        (crc,) = _CRC.unpack_from(data, end)
        if zlib.crc32(body) != crc:
            return
        yield off, lsn, kind, body[_HEAD.size:]
        off = end + _CRC.size


def record_boundaries(data):
    """Byte offsets at which a crash leaves the log with whole records only."""
    out = [0]
    for off, lsn, kind, payload in parse_log(data):
        out.append(off + _HEAD.size + len(payload) + _CRC.size)
    return out


# --------------------------------------------------------------------------
# ownership relaying for page_lsn maintenance
# --------------------------------------------------------------------------

class RelayState:
    __slots__ = ("latch", "grants", "lock", "updates")

    def __init__(self):
        self.latch = RWLatch()
        self.grants = 0
        self.lock = threading.Lock()
        self.updates = 0


def relay_of(page):
    st = page.relay
    if st is None:
        with _relay_init:
            st = page.relay
            if st is None:
                st = page.relay = RelayState()
    return st


_relay_init = threading.Lock()


def or_acquire(page):
    st = relay_of(page)
    st.latch.acquire_shared()
    with st.lock:
        st.grants += 1
    return st


def or_maybe_own(page, writer_lsn):
    """Try to become the page owner. Caller still holds its shared latch."""
    st = relay_of(page)
    with st.lock:
        if writer_lsn > page.owner_lsn:
            page.owner_lsn = writer_lsn
            return True
    return False


def or_promote(page, writer_lsn):
    """Exclusive re-check after the shared latch is gone; only the current owner stamps."""
    st = relay_of(page)
    st.latch.acquire_exclusive()
    try:
        if page.owner_lsn == writer_lsn and writer_lsn > page.page_lsn:
            page.page_lsn = writer_lsn
            st.updates += 1
            return True
        return False
    finally:
        st.latch.release_exclusive()


def or_record_write(page, writer_lsn):
    """Single-page form: claim ownership, drop the shared latch, stamp if still owner."""
    owned = or_maybe_own(page, writer_lsn)
    relay_of(page).latch.release_shared()
    if owned:
        return or_promote(page, writer_lsn)
    return False


class Wal:
    """Group-buffered redo log over an in-memory device with an optional file."""

    def __init__(self, path=None, fsync=False, buffer_bytes=64 * 1024, theta_s=256):
        self.path = path
        self.fsync = fsync
        self.buffer_bytes = buffer_bytes
        self.theta_s = theta_s
        self._lock = threading.Lock()
        self._lsn = 0
        self.device = bytearray()  # stable log
        self._pending = bytearray()  # group buffer
        self.flushed_lsn = 0
        self.stable_pages = {}  # page key -> image (simulated stable storage)
        self.flush_log = []  # (page key, page_lsn, max applied lsn) per flush
        self._fh = open(path, "ab") if path else None
        self.records = 0

    # ---- appends --------------------------------------------------------

    def _append(self, kind, payload, force=False):
        with self._lock:
            self._lsn += 1
            lsn = self._lsn
            self._pending += encode_record(lsn, kind, payload)
            self.records += 1
            if force or len(self._pending) >= self.buffer_bytes:
                self._flush_locked()
        return lsn

    def _flush_locked(self):
        if not self._pending:
            return
        data = bytes(self._pending)
        self.device += data
        self._pending.clear()
        self.flushed_lsn = self._lsn
        if self._fh is not None:
            self._fh.write(data)
            self._fh.flush()
            if self.fsync:
                import os
                os.fsync(self._fh.fileno())

    def flush(self):
        with self._lock:
            self._flush_locked()

    def close(self):
        self.flush()
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def log_bytes(self):
        with self._lock:
            return bytes(self.device) + bytes(self._pending)

    def log_tail(self, table_id, range_id, seq, rid, base_rid, enc, start, back, cb, vals, ctx):
        txn = ctx.txn_id if ctx is not None else 0
        payload = _TAIL.pack(SUB_TAIL, table_id, txn, range_id, seq, rid, base_rid, enc, start,
                             encode_link(back), cb, len(vals))
        payload += b"".join(_CV.pack(c, v) for c, v in vals.items())
        lsn = self._append(TAIL_APPEND, payload)
        if ctx is not None:
            ctx.lsns.append(lsn)
        return lsn

    def log_insert(self, table_id, rid, values, start, ctx):
        txn = ctx.txn_id if ctx is not None else 0
        payload = _INSERT.pack(SUB_INSERT, table_id, txn, rid, start, len(values))
        payload += np.asarray(values, dtype="<u8").tobytes()
        lsn = self._append(TAIL_APPEND, payload)
        if ctx is not None:
            ctx.lsns.append(lsn)
        return lsn

    def log_commit(self, ctx):
        return self._append(COMMIT, _COMMIT.pack(ctx.txn_id, ctx.commit_time), force=True)

    def log_abort(self, ctx):
        # no undo: records of transactions without a commit record are tombstoned on recovery
        return None

    def log_merge(self, table_id, range_id, frm, to, cols):
        payload = _MERGE.pack(table_id, range_id, frm, to, len(cols))
        payload += b"".join(struct.pack("<H", c) for c in cols)
        return self._append(MERGE_OP, payload)

    def log_directory(self, table_id, op, *args):
        payload = json.dumps({"table": table_id, "op": op, "args": list(args)}).encode()
        return self._append(DIRECTORY_OP, payload)

    # ---- ownership relaying over a multi-page append ----------------------

    def relay_begin(self, pages):
        pages = sorted(set(pages), key=id)
        for p in pages:
            or_acquire(p)
        return pages

    def relay_end(self, pages, lsn):
        owned = [p for p in pages if or_maybe_own(p, lsn)]
        for p in pages:
            relay_of(p).latch.release_shared()
        for p in owned:
            or_promote(p, lsn)
        for p in pages:
            if p.relay.grants >= self.theta_s:
                self.flush_page(p)

    def flush_page(self, page, key=None):
        """Drain writers, then persist a page image whose content matches its page_lsn."""
        st = relay_of(page)
        st.latch.acquire_exclusive()
        try:
            if page.page_lsn > self.flushed_lsn:
                self.flush()  # log first
            img = page.to_image()
            k = key if key is not None else (page.kind, page.column_id, page.range_id, id(page))
            self.stable_pages[k] = img
            self.flush_log.append((k, page.page_lsn, page.owner_lsn))
            st.grants = 0
        finally:
            st.latch.release_exclusive()
        return img


# --------------------------------------------------------------------------
# recovery
# --------------------------------------------------------------------------

def decode(data):
    """Parse a log into python tuples (useful for tests and recovery)."""
    out = []
    for off, lsn, kind, p in parse_log(data):
        if kind == TAIL_APPEND:
            if p[0] == SUB_TAIL:
                (sub, table, txn, rng, seq, rid, base, enc, start, back, cb, nv) = _TAIL.unpack_from(p)
                vals = {}
                o = _TAIL.size
                for _ in range(nv):
                    c, v = _CV.unpack_from(p, o)
                    vals[c] = v
                    o += _CV.size
                out.append((lsn, "tail", dict(table=table, txn=txn, range=rng, seq=seq, rid=rid,
                                              base=base, enc=enc, start=start, back=back, cb=cb,
                                              vals=vals)))
            else:
                sub, table, txn, rid, start, nv = _INSERT.unpack_from(p)
                vals = np.frombuffer(p, dtype="<u8", count=nv, offset=_INSERT.size).tolist()
                out.append((lsn, "insert", dict(table=table, txn=txn, rid=rid, start=start, vals=vals)))
        elif kind == COMMIT:
            txn, ct = _COMMIT.unpack(p)
            out.append((lsn, "commit", dict(txn=txn, commit_time=ct)))
        elif kind == MERGE_OP:
            table, rng, frm, to, nc = _MERGE.unpack_from(p)
            cols = [struct.unpack_from("<H", p, _MERGE.size + 2 * i)[0] for i in range(nc)]
            out.append((lsn, "merge", dict(table=table, range=rng, frm=frm, to=to, cols=cols)))
        elif kind == DIRECTORY_OP:
            out.append((lsn, "dir", json.loads(p.decode())))
    return out


def _load_image(table, key, page, images):
    img = images.get((key[0], table.table_id) + key[1:]) if images else None
    if img is None:
        return
    ip = Page.from_image(img, capacity=page.capacity)
    page.slots[:] = ip.slots[:page.capacity]
    page.present[:] = ip.present[:page.capacity]
    page.slot_count = ip.slot_count
    page.page_lsn = ip.page_lsn


def _replay_page(table, key, col, rng_id, images):
    d = table.directory
    p = d.get(key)
    if p is not None:
        return p
    if key[0] == "tail":
        pno = key[3]
        row = table._tail_row(table.ranges[rng_id], pno)
        for c, page in enumerate(row):
            if page is not None:
                _load_image(table, ("tail", c, rng_id, pno), page, images)
        return row[col]
    p = Page(PageKind.TAIL, col, rng_id, TAIL_PAGE_SLOTS)
    d.install(key, p)
    _load_image(table, key, p, images)
    return p


def _put_replay(table, key, col, rng_id, slot, value, lsn, images):
    p = _replay_page(table, key, col, rng_id, images)
    if p.page_lsn >= lsn or p.present[slot]:
        return p
    p.slots[slot] = value
    p.present[slot] = True
    p.slot_count = max(p.slot_count, slot + 1)
    return p


DEAD_TXN = TXN_MASK  # never handed out; reads as aborted


def _fill_hole(table, rng, seq):
    """A slot reserved before the crash but never logged: mark it dead so merges pass it."""
    pno, slot = divmod(seq - 1, TAIL_PAGE_SLOTS)
    for col, v in ((table.BASE_RID, rng.lo), (table.CUM_BASE, 0), (table.INDIRECTION, NULL_LINK),
                   (table.START, PENDING | DEAD_TXN), (table.SCHEMA, 0)):
        p = table._tail_page(rng, col, pno)
        if not p.present[slot]:
            p.write_at(slot, v)


def recover(log_data, images=None, **db_kwargs):
    """Rebuild an engine from a (possibly torn) log and optional page images.

    ``images`` maps directory keys ("tail"/"itail", table_id, col, range, pno) to
    page images; cells at or below an image's page_lsn are not replayed.
    """
    from .engine import Database
    from .merge import MergeBatch, merge_inserts, run_merge
    TS = TAIL_PAGE_SLOTS
    from .table import ABSENT, SNAPSHOT_FLAG, COL_MASK, Table, TableConfig

    recs = decode(log_data)
    commits = {r["txn"]: r["commit_time"] for _, k, r in recs if k == "commit"}
    db_kwargs.setdefault("logging", False)
    db = Database(**db_kwargs)
    merger_bg = db.merger
    db.merger = None  # no auto-merge while replaying
    txns = db.txns.table
    max_time = 0
    seen_txn = set()
    merges = []

    def note_txn(tid):
        nonlocal max_time
        if tid == 0 or tid in seen_txn:
            return
        seen_txn.add(tid)
        ctx = TransactionContext(tid, tid, "snapshot")
        if tid in commits:
            ctx.state = TxnState.COMMITTED
            ctx.commit_time = commits[tid]
        else:
            ctx.state = TxnState.ABORTED
            ctx.commit_time = tid
        txns.add(ctx)
        max_time = max(max_time, tid, ctx.commit_time)

    tables = {}
    for lsn, kind, r in recs:
        if kind == "dir":
            op, args, tid = r["op"], r["args"], r["table"]
            if op == "create_table":
                cfg = TableConfig(**args[2])
                t = Table(db, tid, args[0], args[1], cfg, name=args[3], bootstrap=False)
                db.tables[tid] = t
                db._names[t.name] = tid
                db._next_table = max(db._next_table, tid + 1)
                tables[tid] = t
            elif op == "insert_range":
                t = tables[tid]
                ir = t._new_insert_range(tail_hi=args[2])
                assert ir.lo == args[1], (ir.lo, args[1])
            elif op == "tail_block":
                t = tables[tid]
                rng = t.ranges[args[0]]
                rng.add_block(TailRidBlock(args[2], args[3], args[1], rng.range_id))
                db.store._tail_cursor = min(db.store._tail_cursor, args[2] - args[3])
        elif kind == "insert":
            t = tables[r["table"]]
            note_txn(r["txn"])
            rid, start = r["rid"], r["start"]
            ir_id, row = divmod(rid, t.insert_span)
            ir = t.insert_ranges[ir_id]
            ir.next = max(ir.next, row + 1)
            pno, slot = divmod(row, TS)
            for c, v in enumerate(r["vals"]):
                _put_replay(t, ("itail", c, ir_id, pno), c, ir_id, slot, v, lsn, images)
            _put_replay(t, ("itail", t.START, ir_id, pno), t.START, ir_id, slot, start, lsn, images)
            if start != ABSENT and (start & TXN_MASK) in commits:
                t.primary._map[r["vals"][t.key_column]] = rid
        elif kind == "tail":
            t = tables[r["table"]]
            note_txn(r["txn"])
            if r["start"] & PENDING:
                note_txn(r["start"] & TXN_MASK)
            rng = t.ranges[r["range"]]
            seq = r["seq"]
            pno, slot = divmod(seq - 1, TS)
            rid_ = rng.range_id
            for c, v in r["vals"].items():
                _put_replay(t, ("tail", c, rid_, pno), c, rid_, slot, v, lsn, images)
            for col, v in ((t.BASE_RID, r["base"]), (t.CUM_BASE, r["cb"]), (t.INDIRECTION, r["back"]),
                           (t.START, r["start"]), (t.SCHEMA, r["enc"])):
                _put_replay(t, ("tail", col, rid_, pno), col, rid_, slot, v, lsn, images)
            rng.next_seq = max(rng.next_seq, seq + 1)
            rng.written_seq = max(rng.written_seq, seq)
            max_time = max(max_time, r["start"] & TXN_MASK if r["start"] & PENDING else r["start"])
        elif kind == "commit":
            max_time = max(max_time, r["commit_time"])
        elif kind == "merge":
            merges.append(r)

    # rebuild Indirection and the snapshot bitmap from BaseRid, newest record wins
    for t in tables.values():
        for rng in t.ranges:
            for seq in range(1, rng.written_seq + 1):
                m = t.tail_meta(rng, seq)
                if m is None:
                    if seq > rng.hist_upto:
                        _fill_hole(t, rng, seq)
                    continue
                base = t.tail_base_rid(rng, seq)
                off = base - rng.lo
                if m.enc & SNAPSHOT_FLAG:
                    rng.snap_taken[off] |= np.uint64(m.enc & COL_MASK)
                    rng.indirection.store_unsafe(off, encode_link(m.rid))
                elif txns.resolve(m.start) is not None:
                    rng.indirection.store_unsafe(off, encode_link(m.rid))

    for t in tables.values():
        for rng in t.ranges:
            rng.reset_seqs(rng.written_seq + 1)
    db.clock.advance_to(max_time + 1)
    for r in merges:
        t = tables[r["table"]]
        rng = t.ranges[r["range"]]
        if r["frm"] < 0:
            merge_inserts(t, rng, upto=r["to"])
        elif all(rng.tps[c] == r["frm"] - 1 for c in r["cols"]):
            run_merge(t, rng, MergeBatch(rng.range_id, r["frm"], r["to"], frozenset(r["cols"])))
    db.epoch.advance()
    db.merger = merger_bg
    return db
