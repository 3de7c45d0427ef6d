"""Low-level synchronization: logical clock, CAS cells and shared/exclusive latches."""

import threading

import numpy as np

_STRIPES = 64


class Clock:
    """Process-wide logical clock. Time is advanced before it is returned."""

    def __init__(self, start=0):
        self._now = start
        self._lock = threading.Lock()

    def tick(self):
        with self._lock:
            self._now += 1
            return self._now

    def tick_with(self, fn):
        """Tick and run ``fn(t)`` before any other thread can observe a later time."""
        with self._lock:
            self._now += 1
            fn(self._now)
            return self._now

    def now(self):
        return self._now

    def advance_to(self, t):
        """Make the next ``tick()`` return at least ``t``. Never moves backwards."""
        with self._lock:
            if t - 1 > self._now:
                self._now = t - 1


class CasArray:
    """Fixed array of 64-bit words updated only through compare-and-swap.

    Reads are plain loads. Writers serialize per stripe, so a CAS is atomic with
    respect to every other CAS on the same word.
    """

    def __init__(self, n, fill=0):
        self.words = np.full(n, fill, dtype=np.uint64)
        self._locks = [threading.Lock() for _ in range(_STRIPES)]

    def __len__(self):
        return self.words.shape[0]

    def load(self, i):
        return int(self.words[i])

    def cas(self, i, expected, new):
        with self._locks[i % _STRIPES]:
            if int(self.words[i]) != expected:
                return False
            self.words[i] = new
            return True

    def store_unsafe(self, i, value):
        # recovery and bulk load only; no concurrent writers
        self.words[i] = value


class RWLatch:
    """Shared/exclusive page latch (writer-preferring)."""

    __slots__ = ("_cond", "_readers", "_writer", "_waiting_writers")

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire_shared(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1

    def release_shared(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_exclusive(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True

    def release_exclusive(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()
