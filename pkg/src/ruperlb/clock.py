"""Time sources used by the balancer.

Every timestamp handed to the balancer is in seconds from an arbitrary
origin; only differences are ever meaningful.
"""
from __future__ import annotations

import time
from typing import Protocol

from .errors import ClockRegressionError


class Clock(Protocol):
    def now(self) -> float: ...


class MonotonicClock:
    """Wall clock backed by :func:`time.monotonic`, zeroed at construction."""

    def __init__(self) -> None:
        self._origin = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._origin


class VirtualClock:
    """Clock that only moves when told to; used by the simulator."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ClockRegressionError(f"virtual clock cannot go back from {self._now} to {t}")
        self._now = float(t)
