"""Discrete-event execution of a scenario on a virtual clock.

Simulated threads, the per-process monitors and the rank-0 coordinator
are cooperative entities driven from one event heap.  They talk to the
balancer and coordinator through exactly the public operations a
multi-threaded host would use (``report``, ``request_finish``,
``CoordinatorMonitor.step``, ``WorkerMonitor.handle``), with the
in-memory transport in between.  Progress between events is the exact
integral of each thread's speed profile.

Balancing calls and message delivery take zero virtual time.  A thread
waiting on the coordinator consumes time but no iterations.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field

from scipy.optimize import brentq

from ..balancer import TaskEvent, TaskState, Verdict
from ..clock import VirtualClock
from ..conservation import ConservationSample, conservation_sum
from ..coordinator import CoordinatorMonitor, CoordTaskExt, LoopbackBridge, WorkerMonitor
from ..errors import SimulationAborted
from ..transport import InMemoryHub
from .profiles import JitteredProfile
from .scenario import ScenarioConfig

logger = logging.getLogger(__name__)

# Slack when turning a real-valued progress into whole iterations.
_EPS = 1e-9
# Same-instant retries a waiting thread may make before it backs off.
_MAX_RETRIES_PER_INSTANT = 64

TIMELINE_EVENTS = ("report", "checkpoint", "reassign", "finish_request", "finish_grant", "speed")


@dataclass
class ScenarioResult:
    name: str
    mode: str
    process_count: int
    threads_per_process: int
    global_budget: int
    thread_finish: list[list[float]]
    thread_iterations: list[list[int]]
    rank_finish: list[float]
    makespan: float
    total_iterations: int
    ideal_makespan: float
    overshoot_bound: float
    timeline: list[tuple[float, int, int, str, float]] = field(default_factory=list)
    speed_trace: dict[tuple[int, int], list[tuple[float, float]]] = field(default_factory=dict)
    conservation: list[ConservationSample] = field(default_factory=list)

    @property
    def rank_spread(self) -> float:
        return max(self.rank_finish) - min(self.rank_finish)

    @property
    def relative_rank_spread(self) -> float:
        return self.rank_spread / self.makespan if self.makespan > 0 else 0.0

    @property
    def thread_spreads(self) -> list[float]:
        return [max(row) - min(row) for row in self.thread_finish]

    @property
    def thread_spread(self) -> float:
        return max(self.thread_spreads)

    @property
    def overshoot(self) -> int:
        return self.total_iterations - self.global_budget

    @property
    def conservation_violations(self) -> int:
        return sum(1 for s in self.conservation if not s.ok)

    def metric(self, name: str) -> float:
        return float(getattr(self, name))


def build_profiles(cfg: ScenarioConfig) -> list[list]:
    if cfg.jitter <= 0:
        return [list(row) for row in cfg.profiles]
    return [
        [JitteredProfile(p, cfg.jitter, cfg.jitter_interval_s, cfg.rng_seed, r, k) for k, p in enumerate(row)]
        for r, row in enumerate(cfg.profiles)
    ]


def ideal_makespan(profiles, budget: int, horizon: float = 1e12) -> float:
    """Time at which all threads together could have done ``budget`` iterations."""
    flat = [p for row in profiles for p in row]
    total = lambda t: sum(p.cumulative(t) for p in flat) - budget  # noqa: E731
    hi = 1.0
    while total(hi) < 0:
        hi *= 2.0
        if hi > horizon:
            return math.inf
    return brentq(total, 0.0, hi, xtol=1e-9, rtol=1e-12)


@dataclass
class _Thread:
    rank: int
    index: int
    profile: object
    state: str = "run"           # run | wait | done
    acc: float = 0.0             # progress at seg_start
    seg_start: float = 0.0
    seg_cum: float = 0.0
    interval: float = 0.0
    next_report: float = 0.0
    last_report: float = 0.0
    assign_seen: float = math.inf  # last report behind the current assignment
    version: int = 0
    wait_version: int = -1
    wait_budget: int = -1
    wait_coord: bool = False
    retry_t: float = -1.0
    retry_count: int = 0
    finish_t: float = math.nan
    iterations: int = 0

    def progress(self, t: float) -> float:
        if self.state != "run":
            return self.acc
        return self.acc + self.profile.cumulative(t) - self.seg_cum

    def freeze(self, t: float) -> None:
        self.acc = self.progress(t)
        self.seg_start = t
        self.seg_cum = self.profile.cumulative(t)


class _Rank:
    def __init__(self, rank: int, task: TaskState) -> None:
        self.rank = rank
        self.task = task
        self.version = 0
        self.seen_version = 0
        self.threads: list[_Thread] = []
        self.monitor: WorkerMonitor | None = None


class _Simulation:
    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        self.clock = VirtualClock(0.0)
        self.profiles = build_profiles(cfg)
        self.ideal = ideal_makespan(self.profiles, cfg.global_budget)
        self.cap = cfg.max_time_factor * self.ideal
        self.heap: list = []
        self.seq = itertools.count()
        self.timeline: list[tuple[float, int, int, str, float]] = []
        self.conservation: list[ConservationSample] = []
        self.ranks: list[_Rank] = []
        self.coord: CoordinatorMonitor | None = None
        self.coord_version = 0
        self.coord_queued = False
        self.coord_last: list[float] = []
        self.hub: InMemoryHub | None = None

    # -- scheduling --------------------------------------------------------

    def push(self, t: float, kind: str, target, version: int) -> None:
        heapq.heappush(self.heap, (t, next(self.seq), kind, target, version))

    def schedule_thread(self, th: _Thread, t: float, when: float | None = None) -> None:
        th.version += 1
        if th.state == "done":
            return
        if th.state == "wait":
            if when is not None:
                self.push(when, "thread", th, th.version)
            return
        w = self.ranks[th.rank].task.workers[th.index]
        need = w.assigned - th.progress(t)
        t_ex = t if need <= _EPS else th.profile.time_to_reach(t, need)
        self.push(min(t_ex, th.next_report), "thread", th, th.version)

    # -- setup -------------------------------------------------------------

    def _observer(self, rank: _Rank):
        def observe(ev: TaskEvent) -> None:
            kind = ev.kind
            if kind in ("report", "finish_request"):
                self.timeline.append((ev.t, rank.rank, ev.worker, kind, float(ev.value)))
                return
            rank.version += 1
            if kind == "checkpoint":
                plan = ev.detail
                self.timeline.append((ev.t, rank.rank, -1, "checkpoint", float(rank.task.budget)))
                self.conservation.append(ConservationSample(
                    ev.t, f"rank{rank.rank}", plan.branch.value,
                    conservation_sum(rank.task.workers), rank.task.budget,
                ))
            elif kind == "reassign":
                self.timeline.append((ev.t, rank.rank, ev.worker, "reassign", float(ev.value)))
                if ev.worker < len(rank.threads):
                    rank.threads[ev.worker].assign_seen = rank.task.workers[ev.worker].last_report_time
            elif kind == "budget":
                self.timeline.append((ev.t, rank.rank, -1, "reassign", float(ev.value)))
            elif kind == "finish_grant":
                self.timeline.append((ev.t, rank.rank, ev.worker, "finish_grant", float(ev.value)))
        return observe

    def _coord_observer(self, kind: str, origin: int, outcome) -> None:
        if 0 <= origin < len(self.coord_last):
            self.coord_last[origin] = self.clock.now()
        if outcome.plan is None:
            return
        ext = self.coord.ext
        self.conservation.append(ConservationSample(
            self.clock.now(), "global", outcome.plan.branch.value,
            sum(gw.assigned for gw in ext.guess_workers), ext.global_budget,
        ))

    def setup(self) -> None:
        cfg = self.cfg
        for r in range(cfg.process_count):
            task = TaskState(
                cfg.checkpoint_interval_s, cfg.remaining_time_threshold_s,
                cfg.max_speed_deviation, clock=self.clock,
            )
            rank = _Rank(r, task)
            task.observers.append(self._observer(rank))
            self.ranks.append(rank)

        if cfg.process_count == 1:
            self.start_rank(self.ranks[0], cfg.global_budget, 0.0)
            return

        self.coord_last = [0.0] * cfg.process_count
        self.hub = InMemoryHub(self.clock, cfg.process_count, self._on_deliver)
        root = self.ranks[0].task
        root.ext = CoordTaskExt.for_coordinator(cfg.process_count, cfg.global_budget)
        self.coord = CoordinatorMonitor(root, self.hub.coordinator, observer=self._coord_observer)
        self.coord.report_interval = [cfg.initial_report_interval_s] * cfg.process_count
        bridge = LoopbackBridge(root, self.hub.coordinator.post)
        self.ranks[0].monitor = bridge.monitor
        sim = self

        class _Loopback:
            def deliver(self, event) -> None:
                bridge.deliver(event)
                sim.ranks[0].version += 1

        self.hub.attach_loopback(_Loopback())
        for r in range(1, cfg.process_count):
            rank = self.ranks[r]
            rank.monitor = WorkerMonitor(rank.task, self.hub.worker(r), r)
            rank.task.finish_listener = rank.monitor.check_flag
        for rank in self.ranks:
            rank.monitor.send_start()

    def _on_deliver(self, target) -> None:
        t = self.clock.now()
        if target == "coordinator":
            if not self.coord_queued:
                self.coord_queued = True
                self.push(t, "coord_msg", None, 0)
        else:
            self.push(t, "rank", self.ranks[target], 0)

    def start_rank(self, rank: _Rank, budget: int, t: float) -> None:
        T = self.cfg.threads_per_process
        rank.task.start(T, budget, t)
        for k in range(T):
            p = self.profiles[rank.rank][k]
            th = _Thread(rank.rank, k, p, seg_start=t, seg_cum=p.cumulative(t),
                         interval=self.cfg.initial_report_interval_s, last_report=t)
            th.next_report = t + th.interval
            rank.threads.append(th)
        rank.seen_version = rank.version
        for th in rank.threads:
            self.schedule_thread(th, t)

    # -- entity handlers ---------------------------------------------------

    def whole_done(self, th: _Thread, t: float) -> int:
        w = self.ranks[th.rank].task.workers[th.index]
        return max(math.floor(th.progress(t) + _EPS), w.done)

    def on_thread(self, th: _Thread, t: float) -> None:
        task = self.ranks[th.rank].task
        w = task.workers[th.index]
        if th.state == "wait":
            self.finish(th, t, self.whole_done(th, t))
            return
        p = th.progress(t)
        if p >= w.assigned - max(1e-7, 1e-12 * w.assigned):
            done = math.floor(p + _EPS)
            if done < w.assigned:
                # floating-point shortfall at the exhaustion instant
                done = w.assigned
                th.acc, th.seg_start, th.seg_cum = float(done), t, th.profile.cumulative(t)
            self.finish(th, t, max(done, w.done))
            return
        done = self.whole_done(th, t)
        interval = task.report(th.index, done, t)
        if interval < 0:
            th.state = "done"
            return
        th.interval = interval
        th.last_report = t
        th.next_report = t + interval
        self.timeline.append((t, th.rank, th.index, "speed", w.speed()))
        self.schedule_thread(th, t)

    def finish(self, th: _Thread, t: float, done: int) -> None:
        task = self.ranks[th.rank].task
        w = task.workers[th.index]
        was_waiting = th.state == "wait"
        verdict = task.request_finish(th.index, done, t)
        if verdict is Verdict.GRANTED:
            th.freeze(t)
            th.state = "done"
            th.finish_t = t
            th.iterations = w.done
            th.version += 1
            return
        if w.assigned > w.done:
            if was_waiting:
                th.state = "run"
                th.seg_start, th.seg_cum = t, th.profile.cumulative(t)
            if th.next_report <= t:
                th.next_report = t + th.interval
            self.schedule_thread(th, t)
            return
        # Nothing more to do for now: wait for the task or the coordinator.
        if not was_waiting:
            th.freeze(t)
            th.state = "wait"
        th.wait_version = self.ranks[th.rank].version
        th.wait_budget = task.budget
        th.wait_coord = self._coord_finished(task)
        th.version += 1

    @staticmethod
    def _coord_finished(task: TaskState) -> bool:
        return task.ext is not None and task.ext.coord_finished

    def wake(self, rank: _Rank, t: float) -> None:
        if rank.version == rank.seen_version:
            return
        rank.seen_version = rank.version
        for th in rank.threads:
            if th.state == "run":
                self.schedule_thread(th, t)
            elif th.state == "wait":
                w = rank.task.workers[th.index]
                if w.assigned > w.done:
                    th.state = "run"
                    th.seg_start, th.seg_cum = t, th.profile.cumulative(t)
                    if th.next_report <= t:
                        th.next_report = t + th.interval
                    self.schedule_thread(th, t)
                elif th.wait_version != rank.version:
                    changed = (rank.task.budget != th.wait_budget
                               or self._coord_finished(rank.task) != th.wait_coord)
                    if not changed:
                        # only a message echo: re-ask at the next poll
                        th.wait_version = rank.version
                        poll = min(self.cfg.remaining_time_threshold_s, 1.0)
                        self.schedule_thread(th, t, when=t + poll)
                        continue
                    if th.retry_t == t:
                        th.retry_count += 1
                    else:
                        th.retry_t, th.retry_count = t, 0
                    if th.retry_count < _MAX_RETRIES_PER_INSTANT:
                        self.schedule_thread(th, t, when=t)
                    else:
                        poll = min(self.cfg.remaining_time_threshold_s, 1.0)
                        self.schedule_thread(th, t, when=t + poll)

    def on_coord(self, t: float, kind: str, version: int) -> None:
        if kind == "coord_timer" and version != self.coord_version:
            return
        if kind == "coord_msg":
            self.coord_queued = False
        self.coord.step()
        inbox = self.hub.coordinator.inbox
        if inbox and not self.coord_queued:
            self.coord_queued = True
            self.push(t, "coord_msg", None, 0)
        self.coord_version += 1
        if not self.coord.done and self.coord.timeout < 1e8:
            self.push(t + self.coord.timeout, "coord_timer", None, self.coord_version)

    def on_rank(self, rank: _Rank, t: float) -> None:
        event = self.hub.worker(rank.rank).wait_any(0.0)
        if event is None:
            return
        rank.monitor.handle(event)
        rank.version += 1

    def maybe_start(self, t: float) -> None:
        for rank in self.ranks:
            if not rank.task.started and rank.monitor is not None and rank.monitor.start_assignment is not None:
                self.start_rank(rank, rank.monitor.start_assignment, t)

    # -- main loop ---------------------------------------------------------

    def run(self) -> None:
        if not math.isfinite(self.ideal):
            raise SimulationAborted("no thread ever makes progress: the budget cannot be reached")
        self.setup()
        while self.heap:
            t, _, kind, target, version = heapq.heappop(self.heap)
            if t > self.cap:
                raise SimulationAborted(
                    f"virtual time {t:.3f}s exceeded the cap of {self.cap:.3f}s "
                    f"({self.cfg.max_time_factor:g}x the ideal makespan)"
                )
            self.clock.advance_to(t)
            if kind == "thread":
                if version != target.version:
                    continue
                self.on_thread(target, t)
            elif kind in ("coord_msg", "coord_timer"):
                self.on_coord(t, kind, version)
            elif kind == "rank":
                self.on_rank(target, t)
            self.maybe_start(t)
            for rank in self.ranks:
                self.wake(rank, t)
            if all(th.state == "done" for rank in self.ranks for th in rank.threads) and all(
                rank.task.started for rank in self.ranks
            ):
                break
        stuck = [(th.rank, th.index) for rank in self.ranks for th in rank.threads if th.state != "done"]
        if stuck or not all(rank.task.started for rank in self.ranks):
            raise SimulationAborted(f"event queue drained with unfinished threads {stuck}")

    def result(self) -> ScenarioResult:
        cfg = self.cfg
        finish = [[th.finish_t for th in rank.threads] for rank in self.ranks]
        iters = [[th.iterations for th in rank.threads] for rank in self.ranks]
        rank_finish = [max(row) for row in finish]
        bound = 0.0
        for rank in self.ranks:
            for th in rank.threads:
                # the final assignment rests on the thread's report as of the
                # checkpoint that set it, and on the process's last coordinator exchange
                seen = min(th.last_report, th.assign_seen)
                if self.coord_last:
                    seen = min(seen, self.coord_last[rank.rank])
                latency = th.finish_t - seen
                bound += th.profile.peak_speed(seen, th.finish_t) * latency
        trace = {}
        for rank in self.ranks:
            for k, w in enumerate(rank.task.workers):
                trace[(rank.rank, k)] = [(m.elapsed_since_start, m.speed) for m in w.measures]
        return ScenarioResult(
            name=cfg.name, mode="balanced",
            process_count=cfg.process_count, threads_per_process=cfg.threads_per_process,
            global_budget=cfg.global_budget,
            thread_finish=finish, thread_iterations=iters, rank_finish=rank_finish,
            makespan=max(rank_finish), total_iterations=sum(map(sum, iters)),
            ideal_makespan=self.ideal, overshoot_bound=bound,
            timeline=self.timeline, speed_trace=trace, conservation=self.conservation,
        )


def run_static(cfg: ScenarioConfig) -> ScenarioResult:
    """Equal split up front, no balancing: every thread runs its share to completion."""
    profiles = build_profiles(cfg)
    ideal = ideal_makespan(profiles, cfg.global_budget)
    n = cfg.thread_count
    base, extra = divmod(cfg.global_budget, n)
    cap = cfg.max_time_factor * ideal if math.isfinite(ideal) else math.inf
    finish, iters, timeline = [], [], []
    for r, row in enumerate(profiles):
        f_row, i_row = [], []
        for k, p in enumerate(row):
            share = base + (1 if r * cfg.threads_per_process + k < extra else 0)
            t = p.time_to_reach(0.0, share)
            if not t <= cap:
                raise SimulationAborted(
                    f"thread ({r},{k}) cannot finish its {share} iterations within {cap:.3f}s"
                )
            f_row.append(t)
            i_row.append(share)
            timeline.append((t, r, k, "finish_grant", float(share)))
        finish.append(f_row)
        iters.append(i_row)
    timeline.sort(key=lambda e: (e[0], e[1], e[2]))
    rank_finish = [max(row) for row in finish]
    return ScenarioResult(
        name=cfg.name, mode="static",
        process_count=cfg.process_count, threads_per_process=cfg.threads_per_process,
        global_budget=cfg.global_budget,
        thread_finish=finish, thread_iterations=iters, rank_finish=rank_finish,
        makespan=max(rank_finish), total_iterations=sum(map(sum, iters)),
        ideal_makespan=ideal, overshoot_bound=0.0, timeline=timeline,
    )


def run_scenario(cfg: ScenarioConfig, mode: str | None = None) -> ScenarioResult:
    """Run ``cfg`` in ``mode`` (defaults to the config's mode; ``both`` runs balanced)."""
    mode = mode or cfg.mode
    if mode == "static":
        return run_static(cfg)
    sim = _Simulation(cfg)
    sim.run()
    return sim.result()
