"""Monte Carlo estimate of pi on real OS threads, balanced by the library.

Every iteration tests one random point of the unit square against the
quarter disc.  Threads pull their assignment from a :class:`TaskState`,
report progress at the suggested intervals and ask to finish when they
run out; with ``--listen``/``--connect`` several processes share one
global budget through the TCP coordinator protocol.

Random numbers come from xorshift64* (Vigna 2016) run as ``LANES``
independent lanes so a block of points is one vectorised numpy step.
Lane ``j`` of thread ``k`` on rank ``r`` is seeded with splitmix64 applied
to ``seed``, ``r``, ``k`` and ``j`` in turn; outputs are turned into
doubles in [0, 1) from their top 53 bits.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .balancer import TaskState, Verdict
from .clock import MonotonicClock
from .conservation import ConservationRecorder
from .coordinator import CoordinatorMonitor, CoordTaskExt, LoopbackBridge, WorkerMonitor
from .transport import TcpCoordinatorTransport, TcpWorkerTransport

logger = logging.getLogger(__name__)

LANES = 256
_MASK = (1 << 64) - 1
_XS_MULT = np.uint64(0x2545F4914F6CDD1D)


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class XorShiftLanes:
    """``LANES`` parallel xorshift64* generators producing uniform doubles."""

    def __init__(self, seed: int, rank: int = 0, thread: int = 0, lanes: int = LANES) -> None:
        base = splitmix64(splitmix64(splitmix64(seed & _MASK) ^ rank) ^ thread)
        states = []
        for j in range(lanes):
            s = splitmix64(base ^ j)
            states.append(s or 0x9E3779B97F4A7C15)  # the all-zero state is a fixed point
        self._state = np.array(states, dtype=np.uint64)
        self._buffer = np.empty(0)

    def _step(self) -> np.ndarray:
        x = self._state
        x ^= x >> np.uint64(12)
        x ^= x << np.uint64(25)
        x ^= x >> np.uint64(27)
        out = x * _XS_MULT
        return (out >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, n: int) -> np.ndarray:
        chunks = [self._buffer]
        have = len(self._buffer)
        while have < n:
            block = self._step()
            chunks.append(block)
            have += len(block)
        pool = np.concatenate(chunks)
        self._buffer = pool[n:]
        return pool[:n]


def count_inside(rng: XorShiftLanes, n: int) -> int:
    """How many of ``n`` random points fall inside the quarter disc."""
    u = rng.uniform(2 * n).reshape(n, 2)
    return int(np.count_nonzero(u[:, 0] * u[:, 0] + u[:, 1] * u[:, 1] <= 1.0))


@dataclass
class DemoConfig:
    threads: int
    budget: int
    checkpoint_interval: float = 0.2
    remaining_time_threshold: float | None = None
    max_speed_deviation: float = 0.2
    seed: int = 1
    chunk: int = 4096
    listen: tuple[str, int] | None = None
    connect: tuple[str, int] | None = None
    rank: int = 0
    process_count: int = 1


@dataclass
class ThreadOutcome:
    iterations: int = 0
    inside: int = 0
    finish_s: float = math.nan


@dataclass
class DemoResult:
    rank: int
    threads: list[ThreadOutcome]
    budget: int                       # global budget
    conservation: ConservationRecorder
    start_s: float = 0.0
    reassignments: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return sum(t.iterations for t in self.threads)

    @property
    def inside(self) -> int:
        return sum(t.inside for t in self.threads)

    @property
    def pi_estimate(self) -> float:
        return 4.0 * self.inside / self.iterations if self.iterations else math.nan

    @property
    def finish_spread(self) -> float:
        times = [t.finish_s for t in self.threads]
        return max(times) - min(times)


def _work(task: TaskState, k: int, rng: XorShiftLanes, out: ThreadOutcome, chunk: int, poll: float, errors: list) -> None:
    try:
        clock = task.clock
        done = 0
        inside = 0
        interval = task.remaining_time_threshold
        next_report = clock.now() + interval
        w = task.workers[k]
        while True:
            with task.lock:
                target = w.assigned
            if done < target:
                n = min(chunk, target - done)
                inside += count_inside(rng, n)
                done += n
                t = clock.now()
                if t >= next_report:
                    interval = task.report(k, done, t)
                    if interval < 0:
                        break
                    next_report = t + interval
                continue
            verdict = task.request_finish(k, done, clock.now())
            if verdict is Verdict.GRANTED:
                break
            if verdict is Verdict.FORWARDED:
                with task.lock:
                    if w.assigned <= done and w.working():
                        task.wait_for_change(poll)
        out.iterations = done
        out.inside = inside
        out.finish_s = clock.now() - task.start_time
    except BaseException as exc:  # surfaced by the caller
        errors.append(exc)
        with task.lock:
            task.changed.notify_all()


def _run_threads(task: TaskState, cfg: DemoConfig) -> list[ThreadOutcome]:
    poll = min(task.remaining_time_threshold, 1.0)
    outcomes = [ThreadOutcome() for _ in range(cfg.threads)]
    errors: list[BaseException] = []
    threads = [
        threading.Thread(
            target=_work,
            args=(task, k, XorShiftLanes(cfg.seed, cfg.rank, k), outcomes[k], cfg.chunk, poll, errors),
            name=f"worker-{cfg.rank}-{k}",
        )
        for k in range(cfg.threads)
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return outcomes


def _new_task(cfg: DemoConfig) -> TaskState:
    return TaskState(
        cfg.checkpoint_interval, cfg.remaining_time_threshold, cfg.max_speed_deviation,
        clock=MonotonicClock(),
    )


def _count_reassign(task: TaskState) -> list[int]:
    counter = [0]

    def observe(ev) -> None:
        if ev.kind == "reassign":
            counter[0] += 1
        logger.debug("rank event %s t=%.4f worker=%d value=%s", ev.kind, ev.t, ev.worker, ev.value)
    task.observers.append(observe)
    return counter


def run_demo(cfg: DemoConfig, on_listening=None) -> DemoResult:
    """Run one process of the demo; ``on_listening(host, port)`` fires once rank 0 is bound."""
    if cfg.threads < 1:
        raise ValueError("threads must be at least 1")
    if cfg.listen is not None:
        return _run_coordinator(cfg, on_listening)
    if cfg.connect is not None:
        return _run_remote(cfg)
    task = _new_task(cfg)
    recorder = ConservationRecorder()
    recorder.attach_task(task, 0)
    counter = _count_reassign(task)
    task.start(cfg.threads, cfg.budget)
    outcomes = _run_threads(task, cfg)
    return DemoResult(0, outcomes, cfg.budget, recorder, reassignments=counter[0])


def _run_coordinator(cfg: DemoConfig, on_listening) -> DemoResult:
    host, port = cfg.listen
    task = _new_task(cfg)
    transport = TcpCoordinatorTransport(host, port, cfg.process_count, clock=task.clock)
    try:
        if on_listening is not None:
            on_listening(*transport.address)
        transport.accept()
        recorder = ConservationRecorder()
        recorder.attach_task(task, 0)
        counter = _count_reassign(task)
        task.ext = CoordTaskExt.for_coordinator(cfg.process_count, cfg.budget)
        bridge = LoopbackBridge(task, transport.post)
        transport.attach_loopback(bridge)
        monitor = CoordinatorMonitor(task, transport, observer=recorder.coordinator_observer(task))
        monitor.report_interval = [task.remaining_time_threshold] * cfg.process_count
        failure: list[BaseException] = []

        def coordinate() -> None:
            try:
                monitor.run()
            except BaseException as exc:
                failure.append(exc)
                with task.lock:
                    task.changed.notify_all()

        coord_thread = threading.Thread(target=coordinate, name="coordinator")
        coord_thread.start()
        bridge.send_start()
        with task.lock:
            while bridge.start_assignment is None and not failure:
                task.wait_for_change(0.05)
            if failure:
                raise failure[0]
            task.start(cfg.threads, task.budget)
        outcomes = _run_threads(task, cfg)
        coord_thread.join()
        if failure:
            raise failure[0]
        return DemoResult(0, outcomes, cfg.budget, recorder, reassignments=counter[0],
                          extra={"assignments": task.ext.assignments()})
    finally:
        transport.close()


def _run_remote(cfg: DemoConfig) -> DemoResult:
    host, port = cfg.connect
    task = _new_task(cfg)
    transport = TcpWorkerTransport(host, port)
    try:
        recorder = ConservationRecorder()
        recorder.attach_task(task, cfg.rank)
        counter = _count_reassign(task)
        task.ext = CoordTaskExt()
        monitor = WorkerMonitor(task, transport, cfg.rank)
        task.finish_listener = monitor.check_flag
        monitor.start()
        with task.lock:
            task.start(cfg.threads, task.budget)
        failure: list[BaseException] = []

        def serve() -> None:
            try:
                monitor.run()
            except BaseException as exc:
                failure.append(exc)

        mon_thread = threading.Thread(target=serve, name=f"monitor-{cfg.rank}")
        mon_thread.start()
        outcomes = _run_threads(task, cfg)
        mon_thread.join()
        if failure:
            raise failure[0]
        return DemoResult(cfg.rank, outcomes, cfg.budget, recorder, reassignments=counter[0])
    finally:
        transport.close()
