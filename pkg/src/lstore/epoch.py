"""Epoch-based reclamation of displaced pages.

A page retired at time ``r`` is freed once every query that began before
``r`` has finished. Freeing never blocks a query.
"""

import threading
from collections import deque


class EpochManager:
    def __init__(self):
        self._lock = threading.Lock()
        self._active = {}
        self._queue = deque()
        self.freed_pages = 0
        self.retired_pages = 0

    def enter(self, token, begin_time):
        with self._lock:
            self._active[token] = begin_time

    def exit(self, token):
        with self._lock:
            self._active.pop(token, None)

    def floor(self):
        """Minimum begin time over active queries; None when nothing is active."""
        with self._lock:
            return min(self._active.values()) if self._active else None

    def active_count(self):
        return len(self._active)

    def retire(self, pages, retire_time, on_free=None):
        with self._lock:
            self._queue.append((retire_time, list(pages), on_free))
            self.retired_pages += len(pages)

    @property
    def backlog(self):
        return sum(len(p) for _, p, _ in self._queue)

    def advance(self):
        """Free every retired batch whose retire time precedes the epoch floor."""
        with self._lock:
            floor = min(self._active.values()) if self._active else None
            ready = []
            # the queue is ordered by retire time, except across producers; scan it all
            keep = deque()
            while self._queue:
                item = self._queue.popleft()
                if floor is None or item[0] < floor:
                    ready.append(item)
                else:
                    keep.append(item)
            self._queue = keep
        n = 0
        for _, pages, on_free in ready:
            for p in pages:
                if p is not None and hasattr(p, "free"):
                    p.free()
                n += 1
            if on_free is not None:
                on_free()
        self.freed_pages += n
        return n
