"""Injectable time sources.

Every component that needs "now" takes a :class:`Clock` so tests and the
device-fleet simulator can run days of study time in milliseconds of wall
time.  Timestamps are integer epoch milliseconds throughout.
"""
from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now_ms(self) -> int: ...


class SystemClock:
    """Wall clock, millisecond precision."""

    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000


class ManualClock:
    """Settable clock for tests and virtual-time simulation."""

    def __init__(self, start_ms: int = 0) -> None:
        self._now = int(start_ms)
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def set(self, now_ms: int) -> None:
        with self._lock:
            self._now = int(now_ms)

    def advance(self, delta_ms: int) -> int:
        with self._lock:
            self._now += int(delta_ms)
            return self._now
