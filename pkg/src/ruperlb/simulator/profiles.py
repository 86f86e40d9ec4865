"""Time-varying thread speeds.

A :class:`SpeedProfile` gives the speed (iterations per second) of a
simulated thread at virtual time ``t``.  Progress is always derived from
the exact integral of the speed, so the simulator can jump straight from
one event to the next.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from ..errors import ConfigError

KINDS = ("constant", "step_schedule", "sinusoidal", "table")

# Absolute slack when truncating an integral to whole iterations.
_EPS = 1e-9


@dataclass(frozen=True)
class SpeedProfile:
    """Speed of one thread over virtual time.

    ``step_schedule``: ``steps`` holds ``(from_s, multiplier)`` pairs; the
    multiplier applies from ``from_s`` until the next step (1 before the
    first).  ``table``: piecewise-linear multiplier through ``(time_s,
    multiplier)`` points, held constant outside them.  ``sinusoidal``:
    ``base_speed * (1 + amplitude * sin(2*pi*t/period + phase))``.
    """

    kind: str
    base_speed: float
    steps: tuple[tuple[float, float], ...] = ()
    amplitude: float = 0.0
    period: float = 1.0
    phase: float = 0.0
    table: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown profile kind {self.kind!r} (expected one of {', '.join(KINDS)})", "kind")
        if not (math.isfinite(self.base_speed) and self.base_speed >= 0):
            raise ConfigError("base_speed must be a finite non-negative number", "base_speed")
        if self.kind == "step_schedule":
            times = [s[0] for s in self.steps]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ConfigError("step times must be strictly increasing", "steps")
            if any(t < 0 for t in times) or any(m < 0 for _, m in self.steps):
                raise ConfigError("step times and multipliers must be non-negative", "steps")
        elif self.kind == "table":
            if not self.table:
                raise ConfigError("table profile needs at least one point", "table")
            times = [p[0] for p in self.table]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ConfigError("table times must be strictly increasing", "table")
            if times[0] < 0 or any(m < 0 for _, m in self.table):
                raise ConfigError("table times and multipliers must be non-negative", "table")
        elif self.kind == "sinusoidal":
            if not 0 <= self.amplitude <= 1:
                raise ConfigError("amplitude must be in [0,1] so the speed stays non-negative", "amplitude")
            if not self.period > 0:
                raise ConfigError("period must be positive", "period")

    # constructors

    @classmethod
    def constant(cls, base_speed: float) -> SpeedProfile:
        return cls("constant", float(base_speed))

    @classmethod
    def step_schedule(cls, base_speed: float, steps) -> SpeedProfile:
        return cls("step_schedule", float(base_speed), steps=tuple((float(a), float(m)) for a, m in steps))

    @classmethod
    def sinusoidal(cls, base_speed: float, amplitude: float, period: float, phase: float = 0.0) -> SpeedProfile:
        return cls("sinusoidal", float(base_speed), amplitude=float(amplitude), period=float(period), phase=float(phase))

    @classmethod
    def tabulated(cls, base_speed: float, table) -> SpeedProfile:
        return cls("table", float(base_speed), table=tuple((float(a), float(m)) for a, m in table))

    # piecewise representation: segment k starts at _starts[k] with speed
    # _speeds[k] and slope _slopes[k]; the last segment runs forever.

    @cached_property
    def _segments(self) -> tuple[list[float], list[float], list[float], list[float]]:
        b = self.base_speed
        if self.kind == "constant":
            pts = [(0.0, b, 0.0)]
        elif self.kind == "step_schedule":
            pts = [(0.0, b, 0.0)]
            for at, mult in self.steps:
                if at == 0.0:
                    pts[0] = (0.0, b * mult, 0.0)
                else:
                    pts.append((at, b * mult, 0.0))
        elif self.kind == "table":
            table = self.table
            pts = []
            if table[0][0] > 0:
                pts.append((0.0, b * table[0][1], 0.0))
            for (t0, m0), (t1, m1) in zip(table, table[1:]):
                pts.append((t0, b * m0, b * (m1 - m0) / (t1 - t0)))
            pts.append((table[-1][0], b * table[-1][1], 0.0))
        else:
            raise AssertionError("sinusoidal profiles are not piecewise")
        starts = [p[0] for p in pts]
        speeds = [p[1] for p in pts]
        slopes = [p[2] for p in pts]
        cum = [0.0]
        for k in range(len(pts) - 1):
            tau = starts[k + 1] - starts[k]
            cum.append(cum[-1] + speeds[k] * tau + 0.5 * slopes[k] * tau * tau)
        return starts, speeds, slopes, cum

    def speed(self, t: float) -> float:
        if self.kind == "sinusoidal":
            return self.base_speed * (1.0 + self.amplitude * math.sin(2 * math.pi * t / self.period + self.phase))
        starts, speeds, slopes, _ = self._segments
        k = bisect.bisect_right(starts, t) - 1
        k = max(k, 0)
        return max(speeds[k] + slopes[k] * (t - starts[k]), 0.0)

    def cumulative(self, t: float) -> float:
        """Iterations completed over ``[0, t]`` at this speed."""
        if t <= 0:
            return 0.0
        if self.kind == "sinusoidal":
            w = 2 * math.pi / self.period
            return self.base_speed * (
                t + self.amplitude / w * (math.cos(self.phase) - math.cos(w * t + self.phase))
            )
        starts, speeds, slopes, cum = self._segments
        k = bisect.bisect_right(starts, t) - 1
        tau = t - starts[k]
        return cum[k] + speeds[k] * tau + 0.5 * slopes[k] * tau * tau

    def time_to_reach(self, t0: float, amount: float) -> float:
        """Earliest ``t >= t0`` with ``cumulative(t) - cumulative(t0) >= amount``.

        Returns ``math.inf`` when the speed drops to zero for good first.
        """
        if amount <= 0:
            return t0
        if self.kind == "sinusoidal":
            return self._sin_time_to_reach(t0, amount)
        starts, speeds, slopes, cum = self._segments
        target = self.cumulative(t0) + amount
        k = max(bisect.bisect_right(starts, t0) - 1, 0)
        # segment containing the target
        j = bisect.bisect_left(cum, target, lo=k + 1) - 1
        j = max(j, k)
        while j + 1 < len(cum) and cum[j + 1] < target:
            j += 1
        rem = target - cum[j]
        v, g = speeds[j], slopes[j]
        if j == len(cum) - 1 and v <= 0:
            return math.inf
        if g == 0.0:
            tau = rem / v
        else:
            disc = max(v * v + 2.0 * g * rem, 0.0)
            tau = 2.0 * rem / (v + math.sqrt(disc))
        if j + 1 < len(starts):
            tau = min(tau, starts[j + 1] - starts[j])
        return max(starts[j] + tau, t0)

    def _sin_time_to_reach(self, t0: float, amount: float) -> float:
        if self.base_speed <= 0:
            return math.inf
        c0 = self.cumulative(t0)
        f = lambda t: self.cumulative(t) - c0 - amount  # noqa: E731
        lo_speed = self.base_speed * (1.0 - self.amplitude)
        if lo_speed > 0:
            hi = t0 + amount / lo_speed
        else:
            hi = t0 + amount / self.base_speed + self.period
        while f(hi) < 0:
            hi += self.period
        return brentq(f, t0, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "base_speed": self.base_speed}
        if self.kind == "step_schedule":
            d["steps"] = [list(s) for s in self.steps]
        elif self.kind == "sinusoidal":
            d.update(amplitude=self.amplitude, period=self.period, phase=self.phase)
        elif self.kind == "table":
            d["table"] = [list(p) for p in self.table]
        return d

    def peak_speed(self, t0: float, t1: float) -> float:
        """Largest speed reached on ``[t0, t1]``."""
        if self.kind == "sinusoidal":
            return self.base_speed * (1.0 + self.amplitude)
        starts, _, _, _ = self._segments
        probes = [t0, t1] + [s for s in starts if t0 < s < t1]
        # piecewise-linear: extremes sit on segment ends
        probes += [math.nextafter(s, -math.inf) for s in starts if t0 < s <= t1]
        return max(self.speed(t) for t in probes)


def profile_speed(profile, t: float) -> float:
    if t < 0:
        raise ValueError("profile time must be non-negative")
    return profile.speed(t)


def integrate_iterations(profile, t0: float, t1: float) -> int:
    """Whole iterations completed between ``t0`` and ``t1``."""
    if t1 < t0:
        raise ValueError("integration interval is reversed")
    return math.floor(profile.cumulative(t1) - profile.cumulative(t0) + _EPS)


class JitteredProfile:
    """A profile multiplied by seeded random factors, piecewise constant.

    The factor on ``[k*interval, (k+1)*interval)`` is
    ``max(0, 1 + sigma * N(0,1))``, drawn in order from a generator seeded
    with ``(seed, rank, thread)``, so results are reproducible.
    """

    def __init__(self, base: SpeedProfile, sigma: float, interval: float, seed: int, rank: int, thread: int) -> None:
        if sigma < 0 or interval <= 0:
            raise ValueError("jitter needs sigma >= 0 and interval > 0")
        self.base = base
        self.sigma = sigma
        self.interval = interval
        self._rng = np.random.default_rng([seed, rank, thread])
        self._factors: list[float] = []
        self._prefix = [0.0]  # integral up to the start of block k

    def _factor(self, k: int) -> float:
        while len(self._factors) <= k:
            n = len(self._factors)
            f = max(0.0, 1.0 + self.sigma * float(self._rng.standard_normal()))
            self._factors.append(f)
            a, b = n * self.interval, (n + 1) * self.interval
            self._prefix.append(self._prefix[-1] + f * (self.base.cumulative(b) - self.base.cumulative(a)))
        return self._factors[k]

    def speed(self, t: float) -> float:
        k = int(t // self.interval)
        return self._factor(k) * self.base.speed(t)

    def cumulative(self, t: float) -> float:
        if t <= 0:
            return 0.0
        k = int(t // self.interval)
        f = self._factor(k)
        a = k * self.interval
        return self._prefix[k] + f * (self.base.cumulative(t) - self.base.cumulative(a))

    def time_to_reach(self, t0: float, amount: float, horizon: float = 1e7) -> float:
        if amount <= 0:
            return t0
        target = self.cumulative(t0) + amount
        k = int(t0 // self.interval)
        while True:
            self._factor(k + 1)
            if self._prefix[k + 1] >= target:
                break
            k += 1
            if k * self.interval > horizon:
                return math.inf
        a = k * self.interval
        f = self._factors[k]
        inner = (target - self._prefix[k]) / f
        t = self.base.time_to_reach(a, inner)
        return min(max(t, t0), (k + 1) * self.interval)

    def peak_speed(self, t0: float, t1: float) -> float:
        k0, k1 = int(t0 // self.interval), int(t1 // self.interval)
        best = 0.0
        for k in range(k0, k1 + 1):
            a = max(t0, k * self.interval)
            b = min(t1, (k + 1) * self.interval)
            best = max(best, self._factor(k) * self.base.peak_speed(a, b))
        return best
