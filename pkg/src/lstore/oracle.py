"""Naive single-threaded multi-version reference model.

Committed transactions are replayed in commit-time order into a per-row list
of (commit_time, values) versions. Reads observed by the engine are recorded
per transaction and checked afterwards against the model's state as of each
transaction's begin time, with the transaction's own earlier writes overlaid.
"""

import bisect
import threading


class Oracle:
    def __init__(self, num_columns):
        self.num_columns = num_columns
        self.hist = {}  # rid -> ([times], [values tuple or None])

    def apply(self, commit_time, writes):
        for op in writes:
            kind, rid = op[0], op[1]
            times, vals = self.hist.setdefault(rid, ([], []))
            if times and times[-1] > commit_time:
                raise ValueError("commits must be applied in commit-time order")
            cur = vals[-1] if vals else None
            if kind == "i":
                new = tuple(op[2])
            elif kind == "u":
                if cur is None:
                    raise ValueError(f"update of missing row {rid}")
                row = list(cur)
                for c, v in op[2].items():
                    row[c] = v
                new = tuple(row)
            elif kind == "d":
                new = None
            else:
                raise ValueError(kind)
            if times and times[-1] == commit_time:
                vals[-1] = new
            else:
                times.append(commit_time)
                vals.append(new)

    def at(self, rid, t):
        """Values visible to a snapshot at ``t`` (commit time < t), or None."""
        h = self.hist.get(rid)
        if h is None:
            return None
        i = bisect.bisect_left(h[0], t) - 1
        return h[1][i] if i >= 0 else None

    def as_of(self, rid, t):
        """Values with commit time <= t."""
        return self.at(rid, t + 1)

    def latest(self, rid):
        h = self.hist.get(rid)
        return h[1][-1] if h and h[1] else None

    def rows(self):
        return sorted(self.hist)

    def snapshot(self, t=None):
        out = {}
        for rid in self.hist:
            v = self.latest(rid) if t is None else self.at(rid, t)
            if v is not None:
                out[rid] = v
        return out

    def scan_sum(self, col, t, lo=0, hi=None):
        total = 0
        for rid in self.hist:
            if rid < lo or (hi is not None and rid >= hi):
                continue
            v = self.at(rid, t)
            if v is not None:
                total += v[col]
        return total


class TxnLog:
    __slots__ = ("begin", "commit", "ops", "committed", "isolation")

    def __init__(self, begin, isolation):
        self.begin = begin
        self.commit = None
        self.ops = []
        self.committed = False
        self.isolation = isolation


class History:
    """Thread-safe recorder of what each transaction did and observed."""

    def __init__(self):
        self._lock = threading.Lock()
        self.txns = []

    def start(self, ctx):
        log = TxnLog(ctx.begin_time, ctx.isolation)
        with self._lock:
            self.txns.append(log)
        return log

    def oracle(self, num_columns):
        o = Oracle(num_columns)
        for log in sorted((x for x in self.txns if x.committed), key=lambda x: x.commit):
            o.apply(log.commit, [op for op in log.ops if op[0] in "iud"])
        return o

    def check(self, oracle):
        """Mismatches between observed reads and the model. Empty list means equal."""
        bad = []
        for log in self.txns:
            if log.isolation == "read_committed":
                continue
            own = {}
            for op in log.ops:
                k = op[0]
                if k == "i":
                    own[op[1]] = tuple(op[2])
                elif k == "u":
                    base = own[op[1]] if op[1] in own else oracle.at(op[1], log.begin)
                    row = list(base)
                    for c, v in op[2].items():
                        row[c] = v
                    own[op[1]] = tuple(row)
                elif k == "d":
                    own[op[1]] = None
                elif k == "r":
                    rid, cols, got = op[1], op[2], op[3]
                    exp = own[rid] if rid in own else oracle.at(rid, log.begin)
                    exp = None if exp is None else {c: exp[c] for c in cols}
                    if exp != got:
                        bad.append(("read", log.begin, rid, exp, got))
                elif k == "s":
                    col, lo, hi, got = op[1], op[2], op[3], op[4]
                    exp = 0
                    rids = set(oracle.hist) | set(own)
                    for rid in rids:
                        if rid < lo or rid >= hi:
                            continue
                        v = own[rid] if rid in own else oracle.at(rid, log.begin)
                        if v is not None:
                            exp += v[col]
                    if exp != got:
                        bad.append(("scan", log.begin, col, exp, got))
        return bad
