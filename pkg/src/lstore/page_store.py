"""Physical layer: columnar pages, RID allocation, the page directory."""

import bisect
import itertools
import struct
import threading
import zlib
from enum import IntEnum

import numpy as np

from . import _accel
from .errors import (
    ConfigError,
    PageFull,
    PoisonedRead,
    TailSpaceExhausted,
    UnknownEntry,
    WriteOnceViolation,
)
from .sync import CasArray

BASE_PAGE_SLOTS = 4096  # 32 KB of 8-byte cells
TAIL_PAGE_SLOTS = 512  # 4 KB

RID_CEILING = (1 << 64) - 1
TAIL_FLOOR = 1 << 63  # rid >= TAIL_FLOOR  <=>  tail rid

# Indirection cell: bit 63 is the write latch, bits 0..62 hold the link.
# Tail links keep bit 62 set, which is why tail RIDs stop at LINK_TAIL_FLOOR
# and base RIDs stay below NULL_LINK.
LATCH_BIT = 1 << 63
LINK_MASK = LATCH_BIT - 1
TAIL_TAG = 1 << 62
LINK_TAIL_FLOOR = TAIL_FLOOR | TAIL_TAG
NULL_LINK = TAIL_TAG - 1
BASE_LIMIT = NULL_LINK

MIN_SPAN = 1 << 8
MAX_SPAN = 1 << 20

CANARY = 0xDEADBEEFDEADBEEF
PAGE_MAGIC = b"LSPG"
_PAGE_HEADER = struct.Struct("<4sBIQIQQ")


def is_tail(rid):
    return rid >= TAIL_FLOOR


def encode_link(rid):
    if rid is None:
        return NULL_LINK
    if rid >= TAIL_FLOOR:
        return rid & LINK_MASK
    return rid


def decode_link(cell):
    v = cell & LINK_MASK
    if v == NULL_LINK:
        return None
    if v & TAIL_TAG:
        return v | TAIL_FLOOR
    return v


class PageKind(IntEnum):
    BASE = 0
    TAIL = 1
    MERGED = 2
    HISTORIC = 3


class PoisonStats:
    """Counts reads that hit freed pages. Tests assert this stays at zero."""

    def __init__(self):
        self.reads = 0
        self.lock = threading.Lock()

    def hit(self):
        with self.lock:
            self.reads += 1


POISON = PoisonStats()


class Page:
    __slots__ = (
        "kind", "column_id", "range_id", "capacity", "slots", "present",
        "slot_count", "tps", "page_lsn", "owner_lsn", "sealed", "freed",
        "generation", "latch", "packed", "relay", "write_hook", "group",
    )

    def __init__(self, kind, column_id, range_id, capacity, tps=0, slots=None, present=None):
        self.kind = PageKind(kind)
        self.column_id = column_id
        self.range_id = range_id
        self.capacity = capacity
        if slots is None:
            slots = np.zeros(capacity, dtype=np.uint64)
        self.slots = slots
        if present is None:
            present = np.zeros(capacity, dtype=np.bool_)
        self.present = present
        self.slot_count = 0
        self.tps = tps
        self.page_lsn = 0
        self.owner_lsn = 0
        self.sealed = False
        self.freed = False
        self.generation = 0
        self.latch = threading.Lock()
        self.packed = None
        self.relay = None
        self.write_hook = None
        self.group = None

    def __repr__(self):
        return (f"<Page {self.kind.name} col={self.column_id} range={self.range_id} "
                f"n={self.slot_count} tps={self.tps} gen={self.generation}>")

    @classmethod
    def sealed_from(cls, kind, column_id, range_id, values, tps, compress=True):
        """Build an immutable, fully present page from an array of cells."""
        values = np.ascontiguousarray(values, dtype=np.uint64)
        n = values.shape[0]
        page = cls(kind, column_id, range_id, n, tps=tps, slots=values,
                   present=np.ones(n, dtype=np.bool_))
        page.slot_count = n
        page.seal(compress=compress)
        return page

    def is_full(self):
        return self.slot_count >= self.capacity

    def append(self, cell):
        with self.latch:
            if self.sealed:
                raise WriteOnceViolation("page is sealed")
            i = self.slot_count
            if i >= self.capacity:
                raise PageFull(f"page holds {self.capacity} slots")
            if self.write_hook is not None:
                self.write_hook(self, i)
            self.slots[i] = cell
            self.present[i] = True
            self.slot_count = i + 1
            return i

    def write_at(self, i, cell):
        with self.latch:
            if self.sealed:
                raise WriteOnceViolation("page is sealed")
            if self.present[i]:
                raise WriteOnceViolation(f"slot {i} already written")
            if self.write_hook is not None:
                self.write_hook(self, i)
            self.slots[i] = cell
            self.present[i] = True
            if i >= self.slot_count:
                self.slot_count = i + 1

    def read(self, i):
        if self.freed:
            POISON.hit()
            raise PoisonedRead(repr(self))
        return int(self.slots[i])

    def seal(self, compress=False):
        self.sealed = True
        if compress:
            self.packed = for_encode(self.slots[: self.slot_count])

    def free(self):
        # swap in a canary array; the old array may still back a live page
        self.freed = True
        self.slots = np.full(self.capacity, CANARY, dtype=np.uint64)

    def restamp(self, tps):
        """Same cells, new lineage watermark. Used for columns a merge did not touch."""
        p = Page(self.kind if self.kind != PageKind.BASE else PageKind.MERGED,
                 self.column_id, self.range_id, self.capacity, tps=tps,
                 slots=self.slots, present=self.present)
        p.slot_count = self.slot_count
        p.sealed = True
        p.packed = self.packed
        return p

    # ---- on-disk image -------------------------------------------------

    def to_image(self):
        n = self.slot_count
        if self.group is not None:
            # group writes skip the per-page counter
            hit = np.flatnonzero(self.present)
            n = max(n, int(hit[-1]) + 1 if hit.size else 0)
        head = _PAGE_HEADER.pack(PAGE_MAGIC, int(self.kind), self.column_id, self.range_id,
                                 n, self.tps, self.page_lsn)
        cells = self.slots[:n].astype("<u8").tobytes()
        bitmap = np.packbits(self.present[:n], bitorder="little").tobytes()
        bitmap += b"\0" * ((-len(bitmap)) % 8)
        body = head + cells + bitmap
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_image(cls, data, capacity=None):
        if len(data) < _PAGE_HEADER.size + 4:
            raise ValueError("truncated page image")
        body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
        if zlib.crc32(body) != crc:
            raise ValueError("page image checksum mismatch")
        magic, kind, col, rng, n, tps, lsn = _PAGE_HEADER.unpack_from(body)
        if magic != PAGE_MAGIC:
            raise ValueError("bad page magic")
        cap = max(capacity or n, n)
        off = _PAGE_HEADER.size
        cells = np.frombuffer(body, dtype="<u8", count=n, offset=off).astype(np.uint64)
        off += 8 * n
        nbits = (n + 7) // 8
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8, count=nbits, offset=off),
                             bitorder="little")[:n].astype(np.bool_)
        slots = np.zeros(cap, dtype=np.uint64)
        slots[:n] = cells
        present = np.zeros(cap, dtype=np.bool_)
        present[:n] = bits
        page = cls(kind, col, rng, cap, tps=tps, slots=slots, present=present)
        page.slot_count = n
        page.page_lsn = lsn
        return page


class TailGroup:
    """Backing store for the tail pages of one (range, page number).

    Every column page is a row view of ``vals``/``present``, so one record can
    be written with a single scatter and read back with a single gather.
    """

    __slots__ = ("vals", "present")

    def __init__(self, width, capacity):
        self.vals = np.zeros((width, capacity), dtype=np.uint64)
        self.present = np.zeros((width, capacity), dtype=np.bool_)

    def page(self, column_id, range_id):
        p = Page(PageKind.TAIL, column_id, range_id, self.vals.shape[1],
                 slots=self.vals[column_id], present=self.present[column_id])
        p.group = self
        return p


class BaseGroup:
    """Data-column base pages of one (range, page number) sharing one 2D block.

    ``vals[c]`` backs column c's page. ``page`` is one member, consulted for
    the freed flag; ``tps`` is the lowest lineage watermark of the members.
    """

    __slots__ = ("vals", "tps", "page")

    def __init__(self, vals, tps, page):
        self.vals = vals
        self.tps = tps
        self.page = page


# --------------------------------------------------------------------------
# frame-of-reference compression for sealed pages
# --------------------------------------------------------------------------

_FOR_HEADER = struct.Struct("<QBI")


def for_encode(values):
    """min + per-slot delta width. Deterministic: equal input, equal bytes."""
    values = np.ascontiguousarray(values, dtype=np.uint64)
    n = values.shape[0]
    if n == 0:
        return _FOR_HEADER.pack(0, 0, 0)
    lo = values.min()
    deltas = values - lo
    width = int(deltas.max()).bit_length()
    packed = _accel.for_pack(deltas, width)
    return _FOR_HEADER.pack(int(lo), width, n) + packed.tobytes()


def for_decode(blob):
    lo, width, n = _FOR_HEADER.unpack_from(blob)
    packed = np.frombuffer(blob, dtype=np.uint8, offset=_FOR_HEADER.size)
    deltas = _accel.for_unpack(packed, n, width)
    return deltas + np.uint64(lo)


# --------------------------------------------------------------------------
# directory
# --------------------------------------------------------------------------

class PageDirectory:
    """(kind, column, range, page_no) -> current page handle.

    Each entry is a single reference; replacing it is one dict store, so a
    concurrent lookup sees the old or the new handle and nothing in between.
    """

    def __init__(self, width=66):  # 60 data columns + 6 meta columns
        self._entries = {}
        self._lock = threading.Lock()
        self.swaps = 0
        self.width = width
        self._views = {}

    def view(self, kind, group):
        """Live {page_no: [page per column]} mirror for one (kind, range).

        Readers index it directly instead of building directory keys; it is
        updated under the directory lock together with the entries.
        """
        with self._lock:
            return self._view(kind, group)

    def _view(self, kind, group):
        v = self._views.get((kind, group))
        if v is None:
            v = self._views[(kind, group)] = {}
        return v

    def _mirror(self, key, page):
        if len(key) != 4:
            return
        kind, col, group, pno = key
        v = self._view(kind, group)
        row = v.get(pno)
        if row is None:
            if page is None:
                return
            row = v[pno] = [None] * self.width
        row[col] = page
        if page is None and not any(x is not None for x in row):
            del v[pno]

    def get(self, key):
        return self._entries.get(key)

    def __getitem__(self, key):
        try:
            return self._entries[key]
        except KeyError:
            raise UnknownEntry(key) from None

    def __contains__(self, key):
        return key in self._entries

    def install(self, key, page):
        with self._lock:
            old = self._entries.get(key)
            if old is not None:
                raise ConfigError(f"directory entry {key} already exists")
            self._entries[key] = page
            self._mirror(key, page)

    def swap(self, key, new_page):
        with self._lock:
            old = self._entries.get(key)
            if old is None:
                raise UnknownEntry(key)
            if old is new_page:
                return old
            new_page.generation = old.generation + 1
            self._entries[key] = new_page
            self._mirror(key, new_page)
            self.swaps += 1
            return old

    def remove(self, key):
        with self._lock:
            old = self._entries.pop(key, None)
            if old is not None:
                self._mirror(key, None)
            return old

    def keys(self):
        return list(self._entries)


# --------------------------------------------------------------------------
# update ranges and RID allocation
# --------------------------------------------------------------------------

class TailRidBlock:
    __slots__ = ("hi", "count", "first_seq", "range_id")

    def __init__(self, hi, count, first_seq, range_id):
        self.hi = hi
        self.count = count
        self.first_seq = first_seq
        self.range_id = range_id

    @property
    def lo(self):
        return self.hi - self.count + 1

    def __iter__(self):
        return iter(range(self.hi, self.lo - 1, -1))

    def __len__(self):
        return self.count

    def __repr__(self):
        return f"<TailRidBlock {self.hi:#x}..{self.lo:#x} seq{self.first_seq}+>"


class UpdateRange:
    """A span of base RIDs sharing tail pages; the unit of merging.

    Tail records are numbered by a per-range sequence (1, 2, 3, ...). Lineage
    watermarks (TPS) compare sequence numbers, never raw RIDs.
    """

    def __init__(self, table_id, range_id, lo, span, num_columns=0):
        self.table_id = table_id
        self.range_id = range_id
        self.lo = lo
        self.span = span
        self.blocks = []
        self._neg_his = []
        self.next_seq = 1  # recovery bookkeeping; live appends draw from _seqs
        self._seqs = itertools.count(1)
        self.written_seq = 0
        self.append_lock = threading.Lock()
        self.tps = [0] * num_columns
        self.reset_mark = 0
        self.insert_merged = 0
        self.indirection = CasArray(span, NULL_LINK)
        self.snap_taken = np.zeros(span, dtype=np.uint64)
        self.hist_upto = 0
        self.merges = 0
        self.planned_to = 0
        self.unmerged = 0

    @property
    def hi(self):
        return self.lo + self.span

    @property
    def base_rid_span(self):
        return (self.lo, self.hi)

    @property
    def has_tail(self):
        return bool(self.blocks)

    def __repr__(self):
        return f"<UpdateRange {self.range_id} [{self.lo}, {self.hi}) seq={self.written_seq}>"

    def add_block(self, block):
        self.blocks.append(block)
        self._neg_his.append(-block.hi)

    def reserve_seq(self):
        """Next tail sequence number (atomic: itertools.count.__next__ holds the GIL)."""
        seq = next(self._seqs)
        if seq > self.written_seq:
            self.written_seq = seq  # may briefly lag under races; merges only look below it
        return seq

    def covered(self):
        """Highest sequence number that has a RID block."""
        if not self.blocks:
            return 0
        b = self.blocks[-1]
        return b.first_seq + b.count - 1

    def reset_seqs(self, nxt):
        self.next_seq = nxt
        self._seqs = itertools.count(nxt)

    def seq_of(self, rid):
        i = bisect.bisect_right(self._neg_his, -rid) - 1
        b = self.blocks[i]
        return b.first_seq + (b.hi - rid)

    def rid_of(self, seq):
        # blocks are few and first_seq ascending
        for b in reversed(self.blocks):
            if seq >= b.first_seq:
                return b.hi - (seq - b.first_seq)
        raise KeyError(seq)

    def seqs_of(self, rids):
        """Vectorized rid -> seq; 0 where rid is not a tail rid of this range."""
        rids = np.asarray(rids, dtype=np.uint64)
        out = np.zeros(rids.shape[0], dtype=np.uint64)
        for b in self.blocks:
            m = (rids <= np.uint64(b.hi)) & (rids >= np.uint64(b.lo))
            if m.any():
                out[m] = np.uint64(b.first_seq) + (np.uint64(b.hi) - rids[m])
        return out

    def min_tps(self):
        return min(self.tps) if self.tps else 0


class PageStore:
    """RID allocator and per-table page directories."""

    def __init__(self, tail_floor=LINK_TAIL_FLOOR):
        self._lock = threading.Lock()
        self._base_cursor = {}
        self._tail_cursor = RID_CEILING
        self.tail_floor = tail_floor
        self.directories = {}
        self.ranges = {}
        self.issued_tail = 0

    def directory(self, table_id):
        d = self.directories.get(table_id)
        if d is None:
            with self._lock:
                d = self.directories.setdefault(table_id, PageDirectory())
        return d

    def allocate_update_range(self, table_id, span, num_columns=0):
        if span < MIN_SPAN or span > MAX_SPAN or span & (span - 1):
            raise ConfigError(f"range span {span} must be a power of two in [2^8, 2^20]")
        with self._lock:
            lo = self._base_cursor.get(table_id, 0)
            if lo + span > BASE_LIMIT:
                raise ConfigError("base RID space exhausted")
            self._base_cursor[table_id] = lo + span
            ranges = self.ranges.setdefault(table_id, [])
            rng = UpdateRange(table_id, len(ranges), lo, span, num_columns)
            ranges.append(rng)
        self.directory(table_id)
        return rng

    def allocate_tail_rids(self, rng, count, first_seq=None):
        if count < 1:
            raise ConfigError("count must be >= 1")
        with self._lock:
            hi = self._tail_cursor
            if hi - count + 1 < self.tail_floor:
                raise TailSpaceExhausted("tail RID space exhausted")
            self._tail_cursor = hi - count
            self.issued_tail += count
        if first_seq is None:
            first_seq = rng.blocks[-1].first_seq + rng.blocks[-1].count if rng.blocks else 1
        block = TailRidBlock(hi, count, first_seq, rng.range_id if rng is not None else -1)
        if rng is not None:
            rng.add_block(block)
        return block

    def append_tail_slot(self, page, cell):
        if page.kind != PageKind.TAIL:
            raise ConfigError("append_tail_slot needs a tail page")
        return page.append(cell)

    def directory_swap(self, table_id, column_id, range_id, new_page, page_no=0, kind="base"):
        return self.directory(table_id).swap((kind, column_id, range_id, page_no), new_page)
