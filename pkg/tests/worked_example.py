"""The six-row update/delete walkthrough, plus expected images of its tail,
merged base and compressed history."""

from lstore import Database, TableConfig
from lstore.page_store import LINK_MASK, TAIL_TAG, decode_link
from lstore.table import SNAPSHOT_FLAG


def hm(s):
    """'HH:MM' -> logical time (minutes * 10, so commits land on exact ticks)."""
    h, m = s.split(":")
    return (int(h) * 60 + int(m)) * 10


class Example:
    """Six rows over two update ranges, then the documented update/delete sequence."""

    INSERTS = {1: "10:02", 2: "13:04", 3: "15:05", 4: "16:20", 5: "17:21", 6: "18:02"}

    def __init__(self, **cfg):
        self.db = Database()
        opts = dict(range_size=256, insert_range_size=1024, track_hops=True)
        opts.update(cfg)
        self.t = self.db.create_table(4, 0, config=TableConfig(**opts))
        self.b = {i: i - 1 for i in self.INSERTS}
        for i, tm in self.INSERTS.items():
            self.at(tm, lambda c, i=i: self.t.insert(c, [i, 100 + i, 200 + i, 300 + i]))
        self.db.merge(self.t)

    def at(self, tm, fn):
        self.db.clock.advance_to(hm(tm) - 1)
        ctx = self.db.begin()
        out = fn(ctx)
        self.db.commit(ctx)
        assert ctx.commit_time == hm(tm)
        return out

    def run_updates(self):
        t, b = self.t, self.b
        self.at("19:21", lambda c: t.update(c, b[2], {1: 1021}))
        self.at("19:24", lambda c: t.update(c, b[2], {1: 1022}))
        self.at("19:25", lambda c: t.update(c, b[2], {3: 3021}))
        self.at("19:45", lambda c: t.update(c, b[3], {3: 3031}))
        self.at("20:15", lambda c: t.delete(c, b[1]))
        return self

    @property
    def rng(self):
        return self.t.ranges[0]


# seq -> (back link, updated cols, snapshot?, start "HH:MM", {col: value})
TAIL = {
    1: ("b2", {1}, True, "13:04", {1: 102}),
    2: ("t1", {1}, False, "19:21", {1: 1021}),
    3: ("t2", {1}, False, "19:24", {1: 1022}),
    4: ("t3", {3}, True, "13:04", {3: 302}),
    5: ("t4", {1, 3}, False, "19:25", {1: 1022, 3: 3021}),
    6: ("b3", {3}, True, "15:05", {3: 303}),
    7: ("t6", {3}, False, "19:45", {3: 3031}),
    8: ("b1", set(), False, "20:15", {}),
}

# row -> (indirection, schema bits, start, last updated, values) after merging t1..t7
MERGED = {
    1: ("t8", set(), "10:02", "10:02", [1, 101, 201, 301]),
    2: ("t5", {1, 3}, "13:04", "19:25", [2, 1022, 202, 3021]),
    3: ("t7", {3}, "15:05", "19:45", [3, 103, 203, 3031]),
}

# row -> (union bits, times, {col: values with None for "unchanged"})
COMPRESSED = {
    1: ({1, 3}, ["13:04", "19:21", "19:24", "19:25"], {1: [102, 1021, 1022, None], 3: [302, None, None, 3021]}),
    2: ({3}, ["15:05", "19:45"], {3: [303, 3031]}),
}


def cols_of(mask):
    return {c for c in range(4) if mask >> c & 1}


def link_name(t, rng, link):
    if link is None:
        return None
    if link & TAIL_TAG:
        return f"t{rng.seq_of(link)}"
    return f"b{link + 1}"


def tail_image(ex):
    """Same shape as TAIL, read back from the engine."""
    t, rng = ex.t, ex.rng
    out = {}
    for seq in range(1, rng.written_seq + 1):
        m = t.tail_meta(rng, seq)
        start = t.txns.resolve(m.start)
        out[seq] = (link_name(t, rng, m.back), cols_of(m.enc), bool(m.enc & SNAPSHOT_FLAG),
                    start, {c: t.tail_value(rng, seq, c) for c in cols_of(m.enc)})
    return out


def expected_tail():
    return {k: (b, c, s, hm(tm), v) for k, (b, c, s, tm, v) in TAIL.items()}


def base_image(ex, rows):
    t = ex.t
    out = {}
    for i in rows:
        rng = t.range_of(ex.b[i])
        off = ex.b[i] - rng.lo
        link = decode_link(int(rng.indirection.words[off]) & LINK_MASK)
        out[i] = (link_name(t, rng, link),
                  cols_of(t.base_cell(rng, off, t.SCHEMA)),
                  t.base_cell(rng, off, t.START), t.base_cell(rng, off, t.LAST_UPDATED),
                  [t.base_cell(rng, off, c) for c in range(4)])
    return out


def expected_merged():
    return {k: (ind, c, hm(s), hm(lu), v) for k, (ind, c, s, lu, v) in MERGED.items()}
