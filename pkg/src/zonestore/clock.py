"""Store-wide monotonic logical time in microseconds."""

from __future__ import annotations

import threading
import time


class LogicalClock:
    """Wall-clock microseconds, bumped on ties so every reading is unique."""

    def __init__(self, floor: int = 0):
        self._last = floor
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            t = max(time.time_ns() // 1000, self._last + 1)
            self._last = t
            return t

    def advance_to(self, t: int) -> None:
        with self._lock:
            self._last = max(self._last, t)

    @property
    def last(self) -> int:
        return self._last
