"""Requests-per-minute limiter."""

from __future__ import annotations

import threading
import time
from collections import deque
from typing import Callable


class RateLimiter:
    """Blocks until a request may go out without exceeding ``max_calls`` per ``period``.

    Keeps the timestamps of the last ``max_calls`` grants, so any half-open
    window of length ``period`` holds at most ``max_calls`` requests. ``clock``
    and ``sleep`` are injectable for virtual-time tests.
    """

    def __init__(
        self,
        max_calls: int,
        period: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_calls <= 0:
            raise ValueError("max_calls must be positive")
        self.max_calls = max_calls
        self.period = period
        self.clock = clock
        self.sleep = sleep
        self._grants: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            while True:
                now = self.clock()
                while self._grants and now - self._grants[0] >= self.period:
                    self._grants.popleft()
                if len(self._grants) < self.max_calls:
                    self._grants.append(now)
                    return now
                self.sleep(max(self._grants[0] + self.period - now, 0.0))


class Unlimited:
    def acquire(self) -> float:
        return time.monotonic()
