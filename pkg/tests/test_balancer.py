from __future__ import annotations

import math
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import Trace, interval_oracle, largest_first_split, thread_checkpoint_oracle
from ruperlb import (
    Branch,
    ClockRegressionError,
    ConfigError,
    CoordTaskExt,
    IterationRegressionError,
    SpeedMeasure,
    TaskState,
    Verdict,
    VirtualClock,
    WorkerState,
    plan_redistribution,
    proportional_split,
    suggest_interval,
)
from ruperlb.balancer import write_measures_csv
from ruperlb.conservation import conservation_sum


def worker(done=0, speed=0.0, t_r=0.0, assigned=0, finished=False) -> WorkerState:
    w = WorkerState()
    w.start(0.0, assigned)
    w.done = done
    w.last_report_time = t_r
    if speed:
        w.measures.append(SpeedMeasure(max(t_r, 1.0), speed))
    w.finished = finished
    return w


def task_with(n, budget, t_min=5.0, dt_pc=30.0) -> TaskState:
    task = TaskState(dt_pc, t_min, clock=VirtualClock())
    task.start(n, budget, t=0.0)
    return task


# -- worker operations --------------------------------------------------------


def test_working_states():
    w = WorkerState()
    assert not w.working()
    w.start(0.0, 10)
    assert w.working()
    w.finished = True
    assert not w.working()


def test_elapsed():
    w = worker(t_r=10.0)
    assert w.elapsed(25.0) == 15.0
    assert w.elapsed(10.0) == 0.0
    with pytest.raises(ClockRegressionError):
        w.elapsed(5.0)


def test_speed_is_latest_measure():
    w = WorkerState()
    assert w.speed() == 0.0
    w.measures = [SpeedMeasure(10, 5.0)]
    assert w.speed() == 5.0
    w.measures.append(SpeedMeasure(20, 8.0))
    assert w.speed() == 8.0


def test_add_measure_deviation():
    w = worker(speed=10.0, t_r=0.0)
    assert w.add_measure(10.0, 150) == pytest.approx(1.5)
    assert w.speed() == 15.0
    assert w.measures[-1] == SpeedMeasure(10.0, 15.0)


def test_add_measure_unchanged_speed():
    w = worker(done=0, speed=10.0, t_r=0.0)
    assert w.add_measure(10.0, 100) == 1.0
    assert w.speed() == 10.0


def test_first_measure_has_no_deviation():
    w = worker()
    assert w.add_measure(10.0, 50) == 1.0
    assert w.speed() == 5.0


def test_add_measure_rejects_regressions():
    w = worker(done=100, speed=10.0, t_r=10.0)
    with pytest.raises(ClockRegressionError):
        w.add_measure(10.0, 200)
    with pytest.raises(IterationRegressionError):
        w.add_measure(20.0, 50)


def test_pred_done():
    assert worker(done=100, speed=10.0, t_r=0.0).pred_done(5.0) == 150
    assert worker(done=100, t_r=0.0).pred_done(5.0) == 100
    assert worker(done=100, speed=10.0, t_r=5.0).pred_done(5.0) == 100
    assert worker(done=100, speed=10.0, finished=True).pred_done(50.0) == 100


# -- report interval ----------------------------------------------------------


def test_interval_shrinks_on_deviation():
    assert suggest_interval(10.0, 1.5, 0.2, 30.0) == pytest.approx(8.0)


def test_interval_grows_when_steady():
    assert suggest_interval(10.0, 1.0, 0.2, 30.0) == pytest.approx(11.0)


def test_interval_clamped_below_checkpoint_interval():
    assert suggest_interval(40.0, 1.1, 0.2, 30.0) == pytest.approx(24.0)


def test_report_on_finished_worker():
    task = task_with(2, 100)
    task.workers[0].finished = True
    assert task.report(0, 10, 1.0) == -1.0


def test_report_returns_adjusted_interval():
    task = task_with(1, 10_000)
    assert task.report(0, 100, 10.0) == pytest.approx(11.0)
    assert task.report(0, 250, 20.0) == pytest.approx(8.0)


@given(
    elapsed=st.floats(0.0, 1e4),
    ratio=st.floats(0.0, 10.0),
    ds_max=st.floats(0.01, 0.99),
    dt_pc=st.floats(0.01, 1e3),
)
def test_interval_matches_reference_and_stays_bounded(elapsed, ratio, ds_max, dt_pc):
    dt = suggest_interval(elapsed, ratio, ds_max, dt_pc)
    assert dt == interval_oracle(elapsed, ratio, ds_max, dt_pc)
    assert 0.0 <= dt <= dt_pc


# -- splitting and checkpoints ------------------------------------------------


def test_start_splits_evenly():
    task = task_with(4, 1000)
    assert [w.assigned for w in task.workers] == [250] * 4
    task = task_with(3, 10)
    assert [w.assigned for w in task.workers] == [4, 3, 3]
    with pytest.raises(ValueError):
        task_with(0, 10)


def test_checkpoint_redistributes_by_speed():
    workers = [worker(100, 10.0, assigned=500), worker(300, 30.0, assigned=500)]
    plan = plan_redistribution(workers, 1000, 0.0, 1.0)
    assert plan.branch is Branch.REDISTRIBUTE
    assert plan.speed_total == 40.0
    assert plan.done_total == 400
    assert plan.remaining_time == pytest.approx(15.0)
    assert plan.assignments == {0: 250, 1: 750}


def test_checkpoint_force_finish():
    workers = [worker(100, 10.0, assigned=500), worker(300, 30.0, assigned=500)]
    plan = plan_redistribution(workers, 400, 0.0, 1.0)
    assert plan.branch is Branch.FINISH
    assert plan.assignments == {0: 100, 1: 300}


def test_checkpoint_holds_near_the_end():
    # I_pred = 995 with s_t = 10: t_res = 0.5 s <= t_min
    workers = [worker(990, 10.0, t_r=0.0, assigned=1000)]
    plan = plan_redistribution(workers, 1000, 0.5, 5.0)
    assert plan.predicted_total == 995
    assert plan.branch is Branch.HOLD
    assert plan.assignments == {}


def test_checkpoint_stalled_without_speeds():
    task = task_with(2, 100)
    plan = task.checkpoint(1.0, force=True)
    assert plan.branch is Branch.STALLED
    assert [w.assigned for w in task.workers] == [50, 50]


def test_checkpoint_matches_trace_oracle():
    task = task_with(2, 1000, t_min=1.0, dt_pc=1e9)
    task.report(0, 100, 10.0)
    task.report(1, 300, 10.0)
    task.checkpoint(10.0)
    expected = thread_checkpoint_oracle(
        [Trace(0.0, [(10.0, 100)]), Trace(0.0, [(10.0, 300)])], 1000, 10.0, 1.0
    )
    assert expected.assignments == {0: 250, 1: 750}
    assert [w.assigned for w in task.workers] == [250, 750]


def test_report_triggers_checkpoint_after_interval():
    task = task_with(2, 10_000, dt_pc=30.0)
    kinds = []
    task.observers.append(lambda ev: kinds.append(ev.kind))
    task.report(0, 100, 10.0)
    assert "checkpoint" not in kinds
    task.report(1, 3000, 30.0)
    assert "checkpoint" in kinds
    assert task.last_checkpoint_time == 30.0


def test_proportional_split_remainder_goes_to_fast_workers():
    assert proportional_split(10, [1.0, 1.0, 1.0]) == [4, 3, 3]
    assert proportional_split(10, [1.0, 2.0, 2.0]) == [2, 4, 4]
    assert proportional_split(11, [1.0, 2.0, 2.0]) == [2, 5, 4]
    with pytest.raises(ValueError):
        proportional_split(10, [0.0, 0.0])


@given(
    amount=st.integers(0, 10**9),
    speeds=st.lists(st.floats(1e-3, 1e6), min_size=1, max_size=8),
)
def test_proportional_split_is_exact_and_fair(amount, speeds):
    parts = proportional_split(amount, speeds)
    assert sum(parts) == amount
    assert parts == largest_first_split(amount, speeds)
    total = sum(speeds)
    for p, s in zip(parts, speeds):
        assert abs(p - amount * s / total) <= 1 + 1e-6 * amount


worker_states = st.lists(
    st.tuples(
        st.integers(0, 10_000),                # done
        st.floats(0.0, 1e4),                   # speed
        st.floats(0.0, 50.0),                  # last report time
        st.booleans(),                         # finished
    ),
    min_size=1,
    max_size=6,
)


@settings(max_examples=300)
@given(states=worker_states, extra=st.integers(-5_000, 200_000), t=st.floats(50.0, 100.0),
       t_min=st.floats(0.01, 50.0), force=st.booleans())
def test_checkpoint_conserves_and_never_goes_below_done(states, extra, t, t_min, force):
    workers = [worker(d, s, r, assigned=d, finished=f) for d, s, r, f in states]
    budget = max(sum(d for d, *_ in states) + extra, 1)
    plan = plan_redistribution(workers, budget, t, t_min, force)
    for k, assigned in plan.assignments.items():
        assert assigned >= workers[k].done
        workers[k].assigned = assigned
    if plan.branch is Branch.REDISTRIBUTE:
        assert conservation_sum(workers) == budget
    if plan.branch is Branch.FINISH:
        assert conservation_sum(workers) >= budget
    if plan.branch in (Branch.HOLD, Branch.STALLED):
        assert plan.assignments == {}


# -- finish arbitration ------------------------------------------------------


def test_finish_granted_when_work_is_done():
    task = task_with(1, 100)
    assert task.request_finish(0, 100, 1.0) is Verdict.GRANTED
    assert not task.workers[0].working()
    assert task.finished


def test_finish_needs_report_below_assignment():
    task = task_with(2, 1000)
    assert task.request_finish(0, 300, 10.0) is Verdict.NEED_REPORT
    assert task.workers[0].done == 300


def test_finish_rebalances_when_much_work_remains():
    task = task_with(2, 2000)
    task.report(1, 10, 100.0)
    assert task.request_finish(0, 1000, 100.0) is Verdict.REBALANCED
    assert task.remaining_time(100.0) == pytest.approx(990 / 10.1)
    assert task.workers[0].assigned > 1000
    assert task.workers[0].working()


def test_finish_forwarded_while_coordinator_active():
    task = task_with(1, 100)
    task.ext = CoordTaskExt()
    flags = []
    task.finish_listener = lambda: flags.append(task.ext.finish_requested)
    assert task.request_finish(0, 100, 1.0) is Verdict.FORWARDED
    assert task.ext.finish_requested
    assert flags == [True]
    assert task.workers[0].working()
    task.ext.coord_finished = True
    assert task.request_finish(0, 100, 2.0) is Verdict.GRANTED


def test_request_finish_rejects_bad_index():
    task = task_with(1, 100)
    with pytest.raises(IndexError):
        task.request_finish(3, 100, 1.0)


def test_set_budget_forces_checkpoint():
    task = task_with(2, 1000)
    task.report(0, 100, 10.0)
    task.report(1, 100, 10.0)
    task.set_budget(3000, 10.0)
    assert sum(w.assigned for w in task.workers) == 3000


def test_set_budget_without_speeds_splits_evenly():
    task = task_with(3, 30)
    task.report(0, 4, 10.0)
    task.report(0, 4, 12.0)   # latest speed 0: a checkpoint would stall
    task.set_budget(41, 12.0)
    assert [w.assigned for w in task.workers] == [4 + 13, 12, 12]
    assert sum(w.assigned for w in task.workers) == 41
    assert task.checkpoint(12.0, force=True).branch is Branch.STALLED


def test_parameters_validated():
    with pytest.raises(ConfigError, match=r"max_speed_deviation must be in \(0,1\)"):
        TaskState(30.0, 5.0, 1.5)
    with pytest.raises(ConfigError):
        TaskState(0.0)
    assert TaskState(30.0).remaining_time_threshold == 5.0


def test_measures_csv(tmp_path):
    task = task_with(1, 1000)
    task.report(0, 100, 10.0)
    path = tmp_path / "m.csv"
    write_measures_csv(task, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "worker_id,elapsed_s,speed_it_per_s"
    assert lines[1].split(",")[0] == "0"


def test_concurrent_reports_conserve_budget():
    task = TaskState(0.001, 0.0005)
    task.start(8, 800_000)
    errors = []

    def run(k):
        try:
            done = 0
            while True:
                with task.lock:
                    target = task.workers[k].assigned
                if done < target:
                    done = min(done + 500, target)
                    task.report(k, done, task.clock.now())
                    continue
                verdict = task.request_finish(k, done, task.clock.now())
                if verdict is Verdict.GRANTED:
                    return
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(k,)) for k in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not errors
    assert task.finished
    assert task.done_total() >= 800_000
    assert math.isfinite(task.remaining_time(task.clock.now()))
