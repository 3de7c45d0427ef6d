"""Primary and secondary indexes mapping values to base RIDs."""

import threading

from .errors import DuplicateKey


class PrimaryIndex:
    """Unique key -> base RID. Keys of deleted rows stay reserved."""

    def __init__(self):
        self._map = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._map)

    def get(self, key):
        return self._map.get(key)

    def reserve(self, key, rid):
        with self._lock:
            if key in self._map:
                raise DuplicateKey(key)
            self._map[key] = rid

    def release(self, key, rid):
        with self._lock:
            if self._map.get(key) == rid:
                del self._map[key]

    def items(self):
        return list(self._map.items())

    def clear(self):
        self._map.clear()


class SecondaryIndex:
    """value -> set of base RIDs. Entries are hints; readers re-check the value.

    A value displaced by an update stays indexed until the reclaimer shows no
    reader can still see it.
    """

    def __init__(self, column):
        self.column = column
        self._map = {}
        self._lock = threading.Lock()

    def add(self, value, rid):
        with self._lock:
            s = self._map.get(value)
            if s is None:
                self._map[value] = {rid}
            else:
                s.add(rid)

    def discard(self, value, rid):
        with self._lock:
            s = self._map.get(value)
            if s is not None:
                s.discard(rid)
                if not s:
                    del self._map[value]

    def lookup(self, value):
        return sorted(self._map.get(value, ()))

    def size(self):
        return sum(len(s) for s in self._map.values())


class IndexUpdate:
    """Deferred secondary-index maintenance tied to a transaction outcome."""

    __slots__ = ("table", "index", "rid", "old", "new")

    def __init__(self, table, index, rid, old, new):
        self.table = table
        self.index = index
        self.rid = rid
        self.old = old
        self.new = new

    def on_commit(self, ctx):
        if self.old is None or self.old == self.new:
            return
        idx, rid, old, col = self.index, self.rid, self.old, self.index.column
        table = self.table

        def drop():
            cur = table.latest_committed_value(rid, col)
            if cur != old:
                idx.discard(old, rid)

        table.db.epoch.retire((), table.db.clock.now() + 1, on_free=drop)

    def on_abort(self, ctx):
        if self.new is not None and self.new != self.old:
            cur = self.table.latest_committed_value(self.rid, self.index.column)
            if cur != self.new:
                self.index.discard(self.new, self.rid)
