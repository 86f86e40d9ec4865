"""Thread-level balancing inside one process.

Each executing thread is represented by a :class:`WorkerState` that
periodically reports how many iterations it has completed.  The owning
:class:`TaskState` turns those reports into speed measures, suggests when
the thread should report next, and from time to time redistributes the
iterations still to do in proportion to the measured speeds.  Threads
that run out of work ask the task for permission to finish.

Applicability: the host application must be splittable into tasks whose
threads do not synchronise with each other while running, must be able
to count completed iterations, and must accept a change to the number of
iterations a thread has to do while it is running.  Iterations need not
have a homogeneous cost.

All task operations are serialised on a re-entrant lock, so a task can be
driven from any number of threads.  The module never spawns threads.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Callable, Sequence

from .clock import Clock, MonotonicClock
from .errors import ClockRegressionError, ConfigError, IterationRegressionError

if TYPE_CHECKING:
    from .coordinator import CoordTaskExt

logger = logging.getLogger(__name__)

# Adjustment band applied to the suggested report interval.
MIN_INTERVAL_FACTOR = 0.8
MAX_INTERVAL_FACTOR = 1.2
DEFAULT_MAX_SPEED_DEVIATION = 0.2


@dataclass(frozen=True)
class SpeedMeasure:
    elapsed_since_start: float
    speed: float


@dataclass
class WorkerState:
    """Bookkeeping for one thread executing a task."""

    assigned: int = 0
    done: int = 0
    started: bool = False
    finished: bool = False
    last_report_time: float = 0.0
    start_time: float = 0.0
    measures: list[SpeedMeasure] = field(default_factory=list)

    def start(self, t: float, assigned: int) -> None:
        self.assigned = assigned
        self.done = 0
        self.started = True
        self.finished = False
        self.start_time = t
        self.last_report_time = t
        self.measures = []

    def working(self) -> bool:
        return self.started and not self.finished

    def elapsed(self, t: float) -> float:
        if t < self.last_report_time:
            raise ClockRegressionError(
                f"timestamp {t} precedes last report at {self.last_report_time}"
            )
        return t - self.last_report_time

    def speed(self) -> float:
        """Latest measured speed in iterations per second (0 before any measure)."""
        return self.measures[-1].speed if self.measures else 0.0

    def add_measure(self, t: float, done_total: int) -> float:
        """Register ``done_total`` completed iterations at time ``t``.

        Returns the ratio between the new speed and the previous one, or 1
        when there is no previous speed to compare against.
        """
        if not self.started:
            raise ValueError("worker has not started")
        if t <= self.last_report_time:
            raise ClockRegressionError(
                f"measure at {t} does not advance past last report at {self.last_report_time}"
            )
        if done_total < self.done:
            raise IterationRegressionError(
                f"done went backwards: {done_total} < {self.done}"
            )
        return self._record(t, done_total)

    def _record(self, t: float, done_total: int) -> float:
        previous = self.speed()
        s = max(done_total - self.done, 0) / (t - self.last_report_time)
        self.done = done_total
        self.last_report_time = t
        self.measures.append(SpeedMeasure(t - self.start_time, s))
        if previous <= 0.0:
            return 1.0
        return s / previous

    def pred_done(self, t: float) -> float:
        """Iterations this worker should have completed at ``t`` if its speed holds."""
        if not self.working():
            return float(self.done)
        return self.done + self.speed() * max(t - self.last_report_time, 0.0)


def suggest_interval(elapsed: float, ratio: float, max_deviation: float, checkpoint_interval: float) -> float:
    """Time until the next report, from the last elapsed interval and speed ratio."""
    dev = abs(ratio - 1.0)
    dt = elapsed
    if dev > max_deviation:
        dt *= max(1.0 - (dev - max_deviation), MIN_INTERVAL_FACTOR)
    elif dev < 0.1 * max_deviation:
        dt *= min(1.0 + (0.5 * max_deviation - dev), MAX_INTERVAL_FACTOR)
    if dt > checkpoint_interval:
        dt = 0.8 * checkpoint_interval
    return dt


def proportional_split(amount: int, speeds: Sequence[float]) -> list[int]:
    """Split ``amount`` iterations proportionally to ``speeds``, summing exactly.

    Real-valued shares are floored; the leftover is handed out one
    iteration at a time in descending speed order (lower index wins ties).
    Shares are computed with exact rationals so the result does not depend
    on floating-point rounding of the division.
    """
    if not speeds:
        return []
    exact = [Fraction(s) for s in speeds]
    total = sum(exact)
    if total <= 0:
        raise ValueError("cannot split over zero total speed")
    parts = [math.floor(s * amount / total) for s in exact]
    leftover = amount - sum(parts)
    order = sorted(range(len(speeds)), key=lambda k: (-exact[k], k))
    for k in range(leftover):
        parts[order[k % len(order)]] += 1
    return parts


class Branch(str, enum.Enum):
    FINISH = "finish"              # budget reached: every working worker stops at its done
    REDISTRIBUTE = "redistribute"  # remaining work shared out by speed
    HOLD = "hold"                  # remaining time below threshold: leave assignments alone
    STALLED = "stalled"            # no speed information: leave assignments alone


@dataclass(frozen=True)
class BalancePlan:
    branch: Branch
    done_total: int
    speed_total: float
    predicted_total: float
    remaining_time: float
    assignments: dict[int, int]


def plan_redistribution(
    workers: Sequence[WorkerState],
    budget: int,
    t: float,
    remaining_time_threshold: float,
    force: bool = False,
) -> BalancePlan:
    """Compute (without applying) the outcome of a checkpoint over ``workers``.

    With ``force`` the remaining-time threshold is ignored, so any budget
    left over is always redistributed.
    """
    done_total = 0
    speed_total = 0.0
    predicted = 0.0
    working = []
    for k, w in enumerate(workers):
        done_total += w.done
        if w.working():
            working.append(k)
            speed_total += w.speed()
            predicted += w.pred_done(t)
        else:
            predicted += w.done

    if budget <= done_total:
        return BalancePlan(
            Branch.FINISH, done_total, speed_total, predicted, 0.0,
            {k: workers[k].done for k in working},
        )
    remaining_time = (budget - predicted) / speed_total if speed_total > 0 else math.inf
    if not force and remaining_time <= remaining_time_threshold:
        return BalancePlan(Branch.HOLD, done_total, speed_total, predicted, remaining_time, {})
    if speed_total <= 0:
        return BalancePlan(Branch.STALLED, done_total, speed_total, predicted, remaining_time, {})
    shares = proportional_split(budget - done_total, [workers[k].speed() for k in working])
    return BalancePlan(
        Branch.REDISTRIBUTE, done_total, speed_total, predicted, remaining_time,
        {k: workers[k].done + share for k, share in zip(working, shares)},
    )


class Verdict(str, enum.Enum):
    NEED_REPORT = "need_report"
    REBALANCED = "rebalanced"
    GRANTED = "granted"
    FORWARDED = "forwarded"


@dataclass(frozen=True)
class TaskEvent:
    kind: str
    t: float
    worker: int  # -1 for task-level events
    value: float
    detail: object = None


class TaskState:
    """A task whose iterations are shared among local worker threads.

    ``remaining_time_threshold`` defaults to a sixth of the checkpoint
    interval.  Set ``ext`` to a :class:`~ruperlb.coordinator.CoordTaskExt`
    to make the task part of a multi-process run; finish requests are then
    forwarded to the coordinator while process-level balancing is active.
    """

    def __init__(
        self,
        checkpoint_interval: float,
        remaining_time_threshold: float | None = None,
        max_speed_deviation: float = DEFAULT_MAX_SPEED_DEVIATION,
        clock: Clock | None = None,
    ) -> None:
        if remaining_time_threshold is None:
            remaining_time_threshold = checkpoint_interval / 6.0
        validate_parameters(checkpoint_interval, remaining_time_threshold, max_speed_deviation)
        self.checkpoint_interval = float(checkpoint_interval)
        self.remaining_time_threshold = float(remaining_time_threshold)
        self.max_speed_deviation = float(max_speed_deviation)
        self.clock: Clock = clock if clock is not None else MonotonicClock()

        self.budget = 0
        self.workers: list[WorkerState] = []
        self.start_time = 0.0
        self.last_checkpoint_time = 0.0
        self.started = False
        self.finished = False
        self.ext: CoordTaskExt | None = None

        self.lock = threading.RLock()
        self.changed = threading.Condition(self.lock)
        self.observers: list[Callable[[TaskEvent], None]] = []
        # Called (under the lock) whenever the coordinator finish flag is raised.
        self.finish_listener: Callable[[], None] | None = None

    # -- helpers -----------------------------------------------------------

    def _emit(self, kind: str, t: float, worker: int, value: float, detail: object = None) -> None:
        if self.observers:
            event = TaskEvent(kind, t, worker, value, detail)
            for observer in self.observers:
                observer(event)

    def _worker(self, i: int) -> WorkerState:
        if not 0 <= i < len(self.workers):
            raise IndexError(f"worker index {i} out of range (task has {len(self.workers)})")
        return self.workers[i]

    def _coordinator_active(self) -> bool:
        return self.ext is not None and not self.ext.coord_finished

    def _raise_finish_flag(self) -> None:
        ext = self.ext
        if ext is None or ext.coord_finished or ext.finish_requested or ext.finish_sent:
            return
        ext.finish_requested = True
        if self.finish_listener is not None:
            self.finish_listener()

    # -- operations --------------------------------------------------------

    def start(self, n_workers: int, budget: int, t: float | None = None) -> None:
        """Create ``n_workers`` workers and split ``budget`` evenly among them."""
        with self.lock:
            if self.started:
                raise RuntimeError("task already started")
            if n_workers < 1:
                raise ValueError("a task needs at least one worker")
            if budget < 1:
                raise ValueError("budget must be positive")
            if budget < n_workers:
                raise ValueError(f"budget {budget} smaller than worker count {n_workers}")
            t = self.clock.now() if t is None else t
            base, extra = divmod(budget, n_workers)
            self.workers = []
            for k in range(n_workers):
                w = WorkerState()
                w.start(t, base + (1 if k < extra else 0))
                self.workers.append(w)
            self.budget = budget
            self.start_time = t
            self.last_checkpoint_time = t
            self.started = True
            self.finished = False
            self.changed.notify_all()

    def report(self, i: int, done_total: int, t: float) -> float:
        """Register progress of worker ``i``; returns seconds until its next report.

        Returns -1 when the worker is no longer working.  If the checkpoint
        interval has elapsed since the last checkpoint, the checkpoint runs
        before returning.
        """
        with self.lock:
            w = self._worker(i)
            if not w.working():
                return -1.0
            elapsed = w.elapsed(t)
            ratio = w.add_measure(t, done_total)
            interval = suggest_interval(
                elapsed, ratio, self.max_speed_deviation, self.checkpoint_interval
            )
            # Whole-iteration counts over short intervals read as speed swings,
            # and each swing shrinks the interval again: keep it above t_min.
            interval = max(interval, min(self.remaining_time_threshold, 0.8 * self.checkpoint_interval))
            self._emit("report", t, i, done_total, w.speed())
            if t - self.last_checkpoint_time >= self.checkpoint_interval:
                self.checkpoint(t)
            return interval

    def checkpoint(self, t: float | None = None, force: bool = False) -> BalancePlan:
        """Redistribute the iterations still to do among the working workers."""
        with self.lock:
            if not self.started:
                raise RuntimeError("checkpoint on a task that has not started")
            t = self.clock.now() if t is None else t
            plan = plan_redistribution(
                self.workers, self.budget, t, self.remaining_time_threshold, force
            )
            return self._apply(plan, t)

    def _apply(self, plan: BalancePlan, t: float) -> BalancePlan:
        with self.lock:
            self.last_checkpoint_time = t
            for k, assigned in plan.assignments.items():
                self.workers[k].assigned = assigned
            if plan.branch is Branch.STALLED:
                logger.info("checkpoint at %.3f skipped: no working worker has a speed", t)
            elif plan.branch in (Branch.FINISH, Branch.HOLD):
                self._raise_finish_flag()
            self._emit("checkpoint", t, -1, self.budget, plan)
            for k, assigned in plan.assignments.items():
                self._emit("reassign", t, k, assigned)
            if plan.assignments:
                self.changed.notify_all()
            return plan

    def remaining_time(self, t: float) -> float:
        """Estimated seconds to finish the task at current speeds."""
        with self.lock:
            return plan_redistribution(
                self.workers, self.budget, t, self.remaining_time_threshold
            ).remaining_time

    def request_finish(self, i: int, done_total: int, t: float) -> Verdict:
        """Worker ``i`` believes it has completed its assignment; decide what it does next."""
        with self.lock:
            w = self._worker(i)
            if not w.working():
                raise ValueError(f"worker {i} is not working")
            self._emit("finish_request", t, i, done_total)
            if w.done < w.assigned or done_total > w.done:
                self._register(i, done_total, t)
                if not w.working():
                    return Verdict.GRANTED
                if w.done < w.assigned:
                    return Verdict.NEED_REPORT

            plan = plan_redistribution(self.workers, self.budget, t, self.remaining_time_threshold)
            if plan.branch is not Branch.FINISH and plan.remaining_time > self.remaining_time_threshold:
                self.checkpoint(t)
                return Verdict.REBALANCED
            if self._coordinator_active():
                self._raise_finish_flag()
                return Verdict.FORWARDED

            w.finished = True
            if all(not x.working() for x in self.workers):
                self.finished = True
            self._emit("finish_grant", t, i, w.done)
            self.changed.notify_all()
            return Verdict.GRANTED

    def _register(self, i: int, done_total: int, t: float) -> None:
        w = self.workers[i]
        if t > w.last_report_time:
            self.report(i, done_total, t)
        elif done_total != w.done:
            # Same timestamp as the last report: no interval to measure a speed over.
            if done_total < w.done:
                raise IterationRegressionError(f"done went backwards: {done_total} < {w.done}")
            w.done = done_total

    def set_budget(self, budget: int, t: float | None = None) -> None:
        """Install a new iteration budget; a running task rebalances at once."""
        with self.lock:
            if budget == self.budget:
                return
            self.budget = budget
            t = self.clock.now() if t is None else t
            self._emit("budget", t, -1, budget)
            if self.started and not self.finished:
                plan = plan_redistribution(
                    self.workers, budget, t, self.remaining_time_threshold, force=True
                )
                if plan.branch is Branch.STALLED:
                    # No speeds yet, but the new total must still be covered:
                    # share the change out as if every working worker were equal.
                    working = [k for k, w in enumerate(self.workers) if w.working()]
                    shares = proportional_split(budget - plan.done_total, [1.0] * len(working))
                    plan = dataclasses.replace(plan, branch=Branch.REDISTRIBUTE, assignments={
                        k: self.workers[k].done + share for k, share in zip(working, shares)
                    })
                self._apply(plan, t)
            self.changed.notify_all()

    def predicted_done(self, t: float) -> float:
        """Iterations the whole task should have completed at ``t``."""
        with self.lock:
            return sum(w.pred_done(t) for w in self.workers)

    def done_total(self) -> int:
        with self.lock:
            return sum(w.done for w in self.workers)

    def wait_for_change(self, timeout: float) -> None:
        """Block until an assignment or flag changes, or ``timeout`` elapses."""
        with self.changed:
            self.changed.wait(timeout)

    def measure_rows(self) -> list[tuple[int, float, float]]:
        """Speed history as ``(worker_id, elapsed_s, speed_it_per_s)`` rows."""
        with self.lock:
            return [
                (k, m.elapsed_since_start, m.speed)
                for k, w in enumerate(self.workers)
                for m in w.measures
            ]


def validate_parameters(checkpoint_interval: float, remaining_time_threshold: float, max_speed_deviation: float) -> None:
    if not checkpoint_interval > 0:
        raise ConfigError("checkpoint_interval_s must be positive", "checkpoint_interval_s")
    if not remaining_time_threshold > 0:
        raise ConfigError("remaining_time_threshold_s must be positive", "remaining_time_threshold_s")
    if not 0 < max_speed_deviation < 1:
        raise ConfigError("max_speed_deviation must be in (0,1)", "max_speed_deviation")


def write_measures_csv(task: TaskState, path) -> None:
    """Write the per-worker speed history as ``worker_id,elapsed_s,speed_it_per_s``."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["worker_id", "elapsed_s", "speed_it_per_s"])
        for row in task.measure_rows():
            writer.writerow([row[0], repr(row[1]), repr(row[2])])
