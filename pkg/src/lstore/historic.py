"""Compressed, RID-ordered history pages for time-travel reads.

Every base row's merged tail versions are stored together: one ascending list
of version times plus one list per updated column. A column entry of ``None``
means "unchanged since the previous version" and is resolved by walking left
within the same record. When the row has pre-update originals, they form the
first version (at the row's original start time).
"""

import bisect
import struct
import zlib

import numpy as np

from .merge import TailView, resolve_starts
from .page_store import TAIL_PAGE_SLOTS

MAGIC = b"LSHC"
_HEAD = struct.Struct("<4sQI")
_REC = struct.Struct("<QQH")
_ORIG = 1 << 63
_SNAP = 1 << 63
_COLS = (1 << 60) - 1


class HistoricRecord:
    __slots__ = ("base_rid", "union", "has_orig", "times", "encs", "cols")

    def __init__(self, base_rid, union, has_orig, times, encs, cols):
        self.base_rid = base_rid
        self.union = union
        self.has_orig = has_orig
        self.times = times
        self.encs = encs
        self.cols = cols

    def __repr__(self):
        return f"<HistoricRecord {self.base_rid} {self.union:b} {self.times}>"

    def __eq__(self, other):
        return (isinstance(other, HistoricRecord) and self.base_rid == other.base_rid
                and self.union == other.union and self.has_orig == other.has_orig
                and self.times == other.times and self.encs == other.encs and self.cols == other.cols)

    def _value(self, c, i):
        vals = self.cols.get(c)
        if vals is None:
            return None
        while i >= 0:
            if vals[i] is not None:
                return vals[i]
            i -= 1
        return None

    def version_at(self, t):
        """(time, encoding, {col: value}) of the newest tail version with time <= t.

        None when only the originals (or nothing) precede ``t``.
        """
        i = bisect.bisect_right(self.times, t) - 1
        if i < 0 or (i == 0 and self.has_orig):
            return None
        vals = {}
        for c in self.cols:
            v = self._value(c, i)
            if v is not None:
                vals[c] = v
        return self.times[i], self.encs[i], vals

    def originals(self):
        if not self.has_orig:
            return {}
        return {c: v[0] for c, v in self.cols.items() if v[0] is not None}

    def latest(self, c):
        return self._value(c, len(self.times) - 1)


class HistoricPage:
    def __init__(self, range_id, records):
        self.range_id = range_id
        self.records = {r.base_rid: r for r in records}
        self.rids = sorted(self.records)
        self.freed = False
        self.generation = 0
        self.tps = 0

    def __len__(self):
        return len(self.rids)

    def get(self, base_rid):
        if self.freed:
            from .page_store import POISON
            from .errors import PoisonedRead
            POISON.hit()
            raise PoisonedRead("historic page")
        return self.records.get(base_rid)

    def free(self):
        self.freed = True

    def ordered(self):
        return [self.records[r] for r in self.rids]

    def to_image(self):
        out = bytearray(_HEAD.pack(MAGIC, self.range_id, len(self.rids)))
        for rec in self.ordered():
            k = len(rec.times)
            union = rec.union | (_ORIG if rec.has_orig else 0)
            out += _REC.pack(rec.base_rid, union, k)
            out += np.asarray(rec.times, dtype="<u8").tobytes()
            out += np.asarray(rec.encs, dtype="<u8").tobytes()
            for c in sorted(rec.cols):
                vals = rec.cols[c]
                present = np.array([v is not None for v in vals], dtype=np.bool_)
                out += np.packbits(present, bitorder="little").tobytes()
                out += np.asarray([v for v in vals if v is not None], dtype="<u8").tobytes()
        return bytes(out) + struct.pack("<I", zlib.crc32(out))

    @classmethod
    def from_image(cls, data):
        body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
        if zlib.crc32(body) != crc:
            raise ValueError("historic page checksum mismatch")
        magic, range_id, n = _HEAD.unpack_from(body)
        if magic != MAGIC:
            raise ValueError("bad historic page magic")
        off = _HEAD.size
        recs = []
        for _ in range(n):
            rid, union, k = _REC.unpack_from(body, off)
            off += _REC.size
            times = np.frombuffer(body, dtype="<u8", count=k, offset=off).tolist()
            off += 8 * k
            encs = np.frombuffer(body, dtype="<u8", count=k, offset=off).tolist()
            off += 8 * k
            cols = {}
            nb = (k + 7) // 8
            for c in _bits(union & _COLS):
                present = np.unpackbits(np.frombuffer(body, dtype=np.uint8, count=nb, offset=off),
                                        bitorder="little")[:k].astype(bool)
                off += nb
                m = int(present.sum())
                vals = np.frombuffer(body, dtype="<u8", count=m, offset=off).tolist()
                off += 8 * m
                it = iter(vals)
                cols[c] = [next(it) if p else None for p in present]
            recs.append(HistoricRecord(rid, union & ~_ORIG, bool(union & _ORIG), times, encs, cols))
        return cls(range_id, recs)


def _bits(mask):
    c = 0
    while mask:
        if mask & 1:
            yield c
        mask >>= 1
        c += 1


def read_historic(page, base_rid, as_of, cols=None):
    """Values of ``base_rid`` as of ``as_of`` from a historic page.

    Returns None when the row is absent or no tail version precedes ``as_of``.
    """
    rec = page.get(base_rid)
    if rec is None:
        return None
    got = rec.version_at(as_of)
    if got is None:
        return None
    t, enc, vals = got
    if cols is not None:
        vals = {c: vals[c] for c in cols if c in vals}
    return t, enc, vals


def build_records(entries, num_columns):
    """entries: iterable of (base_rid, seq, time, enc, {col: value}) in seq order.

    Snapshot entries (enc with the top bit) become each row's original version.
    """
    rows = {}
    for base_rid, seq, t, enc, vals in entries:
        rows.setdefault(base_rid, []).append((seq, t, enc, vals))
    out = []
    for base_rid in sorted(rows):
        orig = {}
        versions = []  # [time, enc, vals] merged per commit time
        for seq, t, enc, vals in rows[base_rid]:
            if enc & _SNAP:
                for c, v in vals.items():
                    orig.setdefault(c, v)
                continue
            if versions and versions[-1][0] == t:
                cur = versions[-1]
                cur[1] = enc if enc == 0 else (cur[1] | enc)
                cur[2] = {} if enc == 0 else {**cur[2], **vals}
            else:
                versions.append([t, enc, dict(vals)])
        has_orig = bool(orig)
        orig_time = None
        if has_orig:
            orig_time = rows[base_rid][0][1]
            for seq, t, enc, vals in rows[base_rid]:
                if enc & _SNAP:
                    orig_time = t
                    break
        times, encs, lists = [], [], []
        if has_orig:
            times.append(orig_time)
            encs.append(_mask(orig))
            lists.append(orig)
        for t, enc, vals in versions:
            times.append(t)
            encs.append(enc)
            lists.append(vals)
        union = 0
        for e in encs:
            union |= e
        cols = {}
        for c in _bits(union):
            col = []
            prev = None
            for vals in lists:
                v = vals.get(c)
                if v is None or v == prev:
                    col.append(None)
                else:
                    col.append(v)
                    prev = v
            cols[c] = col
        out.append(HistoricRecord(base_rid, union, has_orig, times, encs, cols))
    return out


def _mask(vals):
    m = 0
    for c in vals:
        m |= 1 << c
    return m


def _merge_old(old_page, new_records):
    if old_page is None:
        return new_records
    merged = dict(old_page.records)
    for rec in new_records:
        prev = merged.get(rec.base_rid)
        if prev is None:
            merged[rec.base_rid] = rec
            continue
        merged[rec.base_rid] = _concat(prev, rec)
    return [merged[r] for r in sorted(merged)]


def _concat(a, b):
    """Append b's versions after a's (b is strictly newer)."""
    orig = a.originals()
    for c, v in b.originals().items():
        orig.setdefault(c, v)
    lists = []
    times, encs = [], []
    has_orig = bool(orig)
    if has_orig:
        t0 = a.times[0] if a.has_orig else b.times[0]
        times.append(t0)
        encs.append(_mask(orig))
        lists.append(orig)
    for rec in (a, b):
        start = 1 if rec.has_orig else 0
        for i in range(start, len(rec.times)):
            vals = {}
            for c in rec.cols:
                if rec.encs[i] >> c & 1:
                    vals[c] = rec._value(c, i)
            times.append(rec.times[i])
            encs.append(rec.encs[i])
            lists.append(vals)
    union = 0
    for e in encs:
        union |= e
    cols = {}
    for c in _bits(union):
        col = []
        prev = None
        for vals in lists:
            v = vals.get(c)
            if v is None or v == prev:
                col.append(None)
            else:
                col.append(v)
                prev = v
        cols[c] = col
    return HistoricRecord(a.base_rid, union, has_orig, times, encs, cols)


def compress_range(table, rng, upto=None):
    """Fold merged tail records older than every active snapshot into the range's
    historic page. Returns the number of tail records compressed."""
    lo = rng.hist_upto + 1
    hi = rng.min_tps() if upto is None else min(upto, rng.min_tps())
    if hi < lo:
        return 0
    cols = table.all_cols
    v = TailView(table, rng, lo, hi, cols)
    times, final, aborted = resolve_starts(table.txns, v.start)
    if not final.all():
        return 0
    floor = table.db.epoch.floor()
    if floor is not None:
        late = np.nonzero(~aborted & (times >= np.uint64(floor)))[0]
        if late.size:
            hi = lo + int(late[0]) - 1
            if hi < lo:
                return 0
    n = hi - lo + 1
    entries = []
    for i in range(n):
        if aborted[i] and not int(v.enc[i]) & _SNAP:
            continue
        enc = int(v.enc[i])
        vals = {c: int(v.vals[ci, i]) for ci, c in enumerate(cols) if enc >> c & 1}
        entries.append((int(v.base[i]), lo + i, int(times[i]), enc, vals))
    d = table.directory
    key = ("hist", 0, rng.range_id, 0)
    old = d.get(key)
    page = HistoricPage(rng.range_id, _merge_old(old, build_records(entries, table.num_columns)))
    page.tps = hi
    if old is None:
        d.install(key, page)
    else:
        d.swap(key, page)
    rng.hist_upto = hi
    retired = [old] if old is not None else []
    last_full = hi // TAIL_PAGE_SLOTS  # pages [0, last_full) hold only compressed records
    for k in d.keys():
        if k[0] == "tail" and k[2] == rng.range_id and k[3] < last_full:
            p = d.remove(k)
            if p is not None:
                retired.append(p)
    db = table.db
    db.epoch.retire(retired, db.clock.now())
    return n


def tail_bytes(table, rng, hi):
    """Uncompressed bytes of tail records 1..hi (all columns written)."""
    total = 0
    for k in table.directory.keys():
        if k[0] == "tail" and k[2] == rng.range_id:
            p = table.directory.get(k)
            if p is not None:
                lo = k[3] * TAIL_PAGE_SLOTS
                n = min(hi - lo, TAIL_PAGE_SLOTS)
                if n > 0:
                    total += 8 * int(p.present[:n].sum())
    return total
