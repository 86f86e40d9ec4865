"""Process-level balancing.

Rank 0 runs a :class:`CoordinatorMonitor` that keeps one
:class:`GuessWorker` per process, periodically asks every process for
its predicted progress, and splits the global budget among processes by
speed, exactly as a task splits its budget among threads.  Every other
rank runs a :class:`WorkerMonitor` that answers those requests and
installs the budget it is handed into its local task.  Rank 0's own
local task talks to the coordinator through a :class:`LoopbackBridge`.

Both monitors are written as step functions over a transport so that the
same code runs on real threads (``run()``) and inside the discrete-event
simulator (which calls ``step()``/``handle()`` itself at virtual times).
"""
from __future__ import annotations

import collections
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

from .balancer import (
    BalancePlan,
    Branch,
    SpeedMeasure,
    TaskState,
    WorkerState,
    plan_redistribution,
    suggest_interval,
)
from .errors import ClockRegressionError, ProtocolError

logger = logging.getLogger(__name__)

TIMEOUT_SENTINEL = 1e9
# Reports due within this many seconds count as due now (absorbs rounding).
TIME_SLACK = 1e-9


class Instruction(enum.IntEnum):
    START = 0
    REPORT = 1
    FINISH_REQUEST = 2


@dataclass(frozen=True)
class Message:
    """Request sent by a process to the coordinator."""

    instruction: Instruction
    origin_rank: int
    timestamp: float
    predicted_done: int = 0


@dataclass(frozen=True)
class Response:
    new_assignment: int
    coord_finished: bool


@dataclass(frozen=True)
class ReportRequest:
    """Coordinator asking a process for a report."""


class GuessWorker(WorkerState):
    """Tracks a whole remote process from its *predicted* iteration counts.

    Unlike a thread worker, ``done`` may go down between reports when the
    process turns out slower than predicted.
    """

    def add_measure(self, t: float, predicted_done: int) -> float:  # type: ignore[override]
        if not self.started:
            raise ValueError("guess worker has not started")
        if t <= self.last_report_time:
            raise ClockRegressionError(
                f"measure at {t} does not advance past last report at {self.last_report_time}"
            )
        current = self.speed()
        if current == 0.0:
            return self._record(t, predicted_done)
        if self.done > predicted_done:
            if self.last_report_time == self.start_time:
                return self._record(t, predicted_done)
            mean_before = self.done / (self.last_report_time - self.start_time)
            mean_now = predicted_done / (t - self.start_time)
            dev = mean_now / mean_before
        else:
            expected = current * (t - self.last_report_time)
            dev = (predicted_done - self.done) / expected
        s = dev * current
        self.measures.append(SpeedMeasure(t - self.start_time, s))
        self.last_report_time = t
        self.done = predicted_done
        return dev


@dataclass
class CoordTaskExt:
    """Process-level state attached to a task.

    ``coord_finished`` is this process's knowledge that process-level
    balancing is over (learnt from a response).  On rank 0,
    ``balance_finished`` is the coordinator's own decision, and
    ``guess_workers``/``global_budget`` are populated.
    """

    guess_workers: list[GuessWorker] = field(default_factory=list)
    coord_finished: bool = False
    global_budget: int = 0
    finish_requested: bool = False
    finish_sent: bool = False
    balance_finished: bool = False

    @classmethod
    def for_coordinator(cls, process_count: int, global_budget: int) -> CoordTaskExt:
        if process_count < 1:
            raise ValueError("process_count must be at least 1")
        return cls(
            guess_workers=[GuessWorker() for _ in range(process_count)],
            global_budget=global_budget,
        )

    def done_global(self, t: float) -> float:
        """Predicted iterations completed by all processes at ``t``."""
        return sum(gw.pred_done(t) for gw in self.guess_workers)

    def assignments(self) -> list[int]:
        return [gw.assigned for gw in self.guess_workers]


def done_global(ext: CoordTaskExt, t: float) -> float:
    return ext.done_global(t)


def start_share(ext: CoordTaskExt, origin: int, t: float) -> int:
    """Preliminary assignment handed to a process when it starts."""
    remaining = max(ext.global_budget - math.floor(ext.done_global(t)), 0)
    n = len(ext.guess_workers)
    base, extra = divmod(remaining, n)
    return base + (1 if origin < extra else 0)


@dataclass(frozen=True)
class ReceiveOutcome:
    response: Response
    interval: float
    plan: BalancePlan | None


def receive_report(task: TaskState, req: Message) -> ReceiveOutcome:
    """Apply a report or finish request from ``req.origin_rank`` on rank 0.

    Stores the predicted progress, rebalances the global budget over all
    processes (or declares process-level balancing finished and freezes
    the assignments), and returns the response for the origin plus the
    suggested time until its next report.
    """
    ext = task.ext
    if ext is None or not ext.guess_workers:
        raise ProtocolError("receive_report needs a coordinator extension")
    if req.instruction not in (Instruction.REPORT, Instruction.FINISH_REQUEST):
        raise ProtocolError(f"receive_report cannot handle {req.instruction!r}")
    if not 0 <= req.origin_rank < len(ext.guess_workers):
        raise ProtocolError(f"unknown origin rank {req.origin_rank}")
    with task.lock:
        gw = ext.guess_workers[req.origin_rank]
        if not gw.started:
            raise ProtocolError(f"rank {req.origin_rank} reported before starting")
        t = req.timestamp
        if ext.balance_finished:
            return ReceiveOutcome(Response(gw.assigned, True), task.checkpoint_interval, None)

        if t > gw.last_report_time:
            elapsed = t - gw.last_report_time
            ratio = gw.add_measure(t, req.predicted_done)
        else:
            # Duplicate timestamp: nothing to measure a speed over.
            elapsed = 0.0
            ratio = 1.0
        now = max([t] + [w.last_report_time for w in ext.guess_workers if w.started])
        plan = plan_redistribution(
            ext.guess_workers, ext.global_budget, now, task.remaining_time_threshold
        )
        if plan.branch in (Branch.FINISH, Branch.HOLD):
            ext.balance_finished = True
            logger.info("process-level balancing finished at %.3f (%s)", t, plan.branch.value)
        else:
            for k, assigned in plan.assignments.items():
                ext.guess_workers[k].assigned = assigned
        interval = suggest_interval(
            elapsed, ratio, task.max_speed_deviation, task.checkpoint_interval
        ) if elapsed > 0 else task.checkpoint_interval
        # Predictions arrive as whole iterations; below t_min their rounding
        # noise reads as speed deviation and would keep shrinking the interval.
        interval = max(interval, min(task.remaining_time_threshold, 0.8 * task.checkpoint_interval))
        return ReceiveOutcome(Response(gw.assigned, ext.balance_finished), interval, plan)


class CoordinatorTransport(Protocol):
    def receive_any(self, timeout: float) -> tuple[Message | None, float]: ...
    def send_to(self, rank: int, response: Response) -> None: ...
    def request_report(self, rank: int) -> None: ...


class WorkerTransport(Protocol):
    def send(self, message: Message) -> None: ...
    def wait_any(self, timeout: float) -> Response | ReportRequest | None: ...


class CoordinatorMonitor:
    """Rank-0 loop: times report requests and answers every process.

    ``observer`` (optional) is called as ``observer(kind, rank, outcome)``
    after each handled request, for tracing and conservation checks.
    """

    def __init__(self, task: TaskState, transport: CoordinatorTransport, observer=None) -> None:
        if task.ext is None or not task.ext.guess_workers:
            raise ValueError("coordinator task needs CoordTaskExt.for_coordinator(...)")
        self.task = task
        self.ext = task.ext
        self.transport = transport
        self.observer = observer
        n = len(self.ext.guess_workers)
        self.report_interval = [task.checkpoint_interval] * n
        self.next_report = [0.0] * n
        self.timeout = task.checkpoint_interval
        self.notified: set[int] = set()
        self.awaiting: set[int] = set()
        self.last_heard = [-math.inf] * n
        self.done = False

    @property
    def process_count(self) -> int:
        return len(self.ext.guess_workers)

    def all_finished(self) -> bool:
        return len(self.notified) == self.process_count

    def _arm(self, rank: int, interval: float) -> None:
        if rank in self.notified:
            self.next_report[rank] = 0.0
            return
        self.next_report[rank] = interval
        if 0 < interval < self.timeout:
            self.timeout = interval

    def step(self) -> bool:
        """One pass of the monitor loop; returns True once the loop is over."""
        req, dt = self.transport.receive_any(self.timeout)
        self.timeout = TIMEOUT_SENTINEL
        for i in range(self.process_count):
            if self.next_report[i] > 0:
                if self.next_report[i] <= dt + TIME_SLACK:
                    self._request(i)
                else:
                    self.next_report[i] -= dt
                    if self.timeout > self.next_report[i]:
                        self.timeout = self.next_report[i]
        if req is not None:
            self._handle(req)
            if self.all_finished():
                self.done = True
        return self.done

    def _handle(self, req: Message) -> None:
        origin = req.origin_rank
        if not 0 <= origin < self.process_count:
            raise ProtocolError(f"message from unknown rank {origin}")
        if req.instruction is Instruction.START:
            with self.task.lock:
                share = start_share(self.ext, origin, req.timestamp)
                gw = self.ext.guess_workers[origin]
                gw.start(req.timestamp, share)
                response = Response(share, self.ext.balance_finished)
            self._send(origin, response)
            self._arm(origin, self.report_interval[origin])
            if self.observer is not None:
                self.observer("start", origin, ReceiveOutcome(response, self.report_interval[origin], None))
        elif req.instruction in (Instruction.REPORT, Instruction.FINISH_REQUEST):
            was_finished = self.ext.balance_finished
            before = self.ext.assignments()
            outcome = receive_report(self.task, req)
            self.last_heard[origin] = self.task.clock.now()
            if req.instruction is Instruction.REPORT:
                self.awaiting.discard(origin)
            self._send(origin, outcome.response)
            if outcome.response.coord_finished and not was_finished:
                self._call_in_all(origin)
            elif outcome.plan is not None and outcome.plan.branch is Branch.REDISTRIBUTE:
                self._call_in_moved(origin, before)
            if req.instruction is Instruction.REPORT:
                self.report_interval[origin] = outcome.interval
                self._arm(origin, outcome.interval)
            elif origin in self.notified:
                self.next_report[origin] = 0.0
            if self.observer is not None:
                kind = "report" if req.instruction is Instruction.REPORT else "finish_request"
                self.observer(kind, origin, outcome)
        else:
            raise ProtocolError(f"unknown instruction {req.instruction!r}")

    def _request(self, rank: int) -> None:
        self.next_report[rank] = 0.0
        self.awaiting.add(rank)
        self.transport.request_report(rank)

    def _call_in_all(self, origin: int) -> None:
        # Balancing just ended: ask every other running process for a report
        # now, so it learns its frozen assignment without waiting for its timer.
        for rank, gw in enumerate(self.ext.guess_workers):
            if rank != origin and rank not in self.notified and rank not in self.awaiting and gw.started:
                self._request(rank)

    def _call_in_moved(self, origin: int, before: list[int]) -> None:
        # A rebalance driven by one process's fresh prediction can move the
        # share of a process whose own prediction is old.  If the move is worth
        # more than t_min of that process's work, hear from it now instead of
        # leaving the stored assignment to rest on stale data.
        now = self.task.clock.now()
        threshold = self.task.remaining_time_threshold
        for rank, gw in enumerate(self.ext.guess_workers):
            if rank == origin or rank in self.notified or rank in self.awaiting or not gw.started:
                continue
            if now - self.last_heard[rank] < threshold:
                continue
            if abs(gw.assigned - before[rank]) > threshold * gw.speed():
                self._request(rank)

    def _send(self, rank: int, response: Response) -> None:
        if response.coord_finished:
            if rank in self.notified:
                # Late request from a process that already left its loop.
                return
            self.notified.add(rank)
        self.transport.send_to(rank, response)

    def run(self) -> None:
        while not self.step():
            pass


def monitor_coordinator(task: TaskState, transport: CoordinatorTransport) -> None:
    CoordinatorMonitor(task, transport).run()


class WorkerMonitor:
    """Process-side loop: answers report requests and forwards finish petitions.

    Responses arrive in the order the requests were sent, so a FIFO of
    outstanding request kinds tells which request each response answers.
    """

    def __init__(self, task: TaskState, transport: WorkerTransport, rank: int, poll_interval: float | None = None) -> None:
        if task.ext is None:
            task.ext = CoordTaskExt()
        self.task = task
        self.ext = task.ext
        self.transport = transport
        self.rank = rank
        if poll_interval is None:
            poll_interval = min(task.remaining_time_threshold, 1.0)
        self.poll_interval = poll_interval
        self.pending: collections.deque[Instruction] = collections.deque()
        self.start_assignment: int | None = None
        self.done = False

    def _now(self) -> float:
        return self.task.clock.now()

    def _predicted(self, t: float) -> int:
        return max(math.floor(self.task.predicted_done(t)), 0)

    def send_start(self) -> None:
        with self.task.lock:
            self.pending.append(Instruction.START)
            self.transport.send(Message(Instruction.START, self.rank, self._now(), 0))

    def start(self) -> int:
        """Blocking start handshake; returns the initial assignment."""
        self.send_start()
        while self.start_assignment is None:
            event = self.transport.wait_any(self.poll_interval)
            if event is not None:
                self.handle(event)
        return self.start_assignment

    def handle(self, event: Response | ReportRequest) -> None:
        with self.task.lock:
            if self.done:
                return
            if isinstance(event, ReportRequest):
                t = self._now()
                self.pending.append(Instruction.REPORT)
                self.transport.send(Message(Instruction.REPORT, self.rank, t, self._predicted(t)))
            elif isinstance(event, Response):
                if not self.pending:
                    raise ProtocolError(f"rank {self.rank}: response without outstanding request")
                kind = self.pending.popleft()
                if event.coord_finished:
                    self.ext.coord_finished = True
                if kind is Instruction.START:
                    self.start_assignment = event.new_assignment
                    if self.task.started:
                        self.task.set_budget(event.new_assignment)
                    else:
                        self.task.budget = event.new_assignment
                else:
                    self.task.set_budget(event.new_assignment)
                if kind is Instruction.FINISH_REQUEST:
                    self.ext.finish_sent = False
                if event.coord_finished:
                    self.ext.finish_requested = False
                    self.done = True
                self.task.changed.notify_all()
            else:
                raise ProtocolError(f"unexpected event {event!r}")

    def check_flag(self) -> None:
        """Send a finish petition if a local thread asked for one."""
        with self.task.lock:
            if self.done or not self.ext.finish_requested or self.ext.finish_sent:
                return
            t = self._now()
            self.pending.append(Instruction.FINISH_REQUEST)
            self.transport.send(Message(Instruction.FINISH_REQUEST, self.rank, t, self._predicted(t)))
            self.ext.finish_requested = False
            self.ext.finish_sent = True

    def step(self) -> bool:
        event = self.transport.wait_any(self.poll_interval)
        if event is not None:
            self.handle(event)
        self.check_flag()
        return self.done

    def run(self) -> None:
        while not self.step():
            pass


def monitor_worker(task: TaskState, transport: WorkerTransport, rank: int) -> None:
    monitor = WorkerMonitor(task, transport, rank)
    monitor.start()
    monitor.run()


class LoopbackBridge:
    """Connects rank 0's local task to the coordinator without a network.

    The bridge is the worker-side transport of rank 0: messages it sends
    go straight into the coordinator inbox (``post``), and requests or
    responses addressed to rank 0 are handled synchronously by
    :meth:`deliver`.
    """

    def __init__(self, task: TaskState, post) -> None:
        self._post = post
        self.monitor = WorkerMonitor(task, self, 0)
        task.finish_listener = self.monitor.check_flag

    def send(self, message: Message) -> None:
        self._post(message)

    def wait_any(self, timeout: float):
        return None

    def deliver(self, event: Response | ReportRequest) -> None:
        self.monitor.handle(event)

    def send_start(self) -> None:
        self.monitor.send_start()

    @property
    def start_assignment(self) -> int | None:
        return self.monitor.start_assignment


def rank0_local_bridge(task: TaskState, post) -> LoopbackBridge:
    return LoopbackBridge(task, post)


def sum_assignments(ext: CoordTaskExt) -> int:
    return sum(gw.assigned for gw in ext.guess_workers)
