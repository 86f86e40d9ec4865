"""Acceptance suite: one test per criterion, summarised at the end of the run.

Each test attaches its observed numbers before asserting, so the summary
line shows them whether the criterion passes or fails.
"""
from __future__ import annotations

import math
import random
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

from oracles import Trace, checkpoint_oracle, coordinator_oracle, thread_speed
from ruperlb import (
    CoordTaskExt,
    Instruction,
    Message,
    TaskState,
    VirtualClock,
    receive_report,
)
from ruperlb.simulator import (
    ScenarioConfig,
    SpeedProfile,
    compare_modes,
    load_scenario,
    run_scenario,
    uniform_profiles,
)

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
C = SpeedProfile.constant


def note(request, text: str) -> None:
    request.node.user_properties.append(("detail", text))
    print(text)


@pytest.fixture(scope="module")
def overhead_run():
    cfg = load_scenario(SCENARIOS / "time_of_day_overhead.json")
    t0 = time.perf_counter()
    result = run_scenario(cfg, "balanced")
    return cfg, result, time.perf_counter() - t0


# -- 1-3: spread bounds --------------------------------------------------------


def test_criterion_1_rank_spread_below_checkpoint_interval(request, overhead_run):
    cfg, r, wall = overhead_run
    note(request, f"rank spread {r.rank_spread:.3f} s < {cfg.checkpoint_interval_s:g} s, "
                  f"makespan {r.makespan:.1f} s, {wall:.2f} s wall")
    assert cfg.process_count == 2 and cfg.threads_per_process == 8
    assert 500 <= r.makespan <= 700
    assert r.rank_spread < cfg.checkpoint_interval_s
    assert wall < 1.0


def test_criterion_2_thread_spread_below_checkpoint_interval(request, overhead_run):
    cfg, r, _ = overhead_run
    spreads = r.thread_spreads
    note(request, "thread spreads " + ", ".join(f"{s:.3f}" for s in spreads)
         + f" s < {cfg.checkpoint_interval_s:g} s")
    assert all(s < cfg.checkpoint_interval_s for s in spreads)


def test_criterion_3_relative_spread_shrinks_with_longer_runs(request, overhead_run):
    cfg, short, _ = overhead_run
    long = run_scenario(cfg.replace(global_budget=4 * cfg.global_budget), "balanced")
    note(request, f"relative rank spread {short.relative_rank_spread:.3e} -> "
                  f"{long.relative_rank_spread:.3e} (makespan {short.makespan:.0f} -> {long.makespan:.0f} s)")
    assert long.rank_spread < cfg.checkpoint_interval_s
    assert long.relative_rank_spread < short.relative_rank_spread


# -- 4-5: makespan -------------------------------------------------------------


def test_criterion_4_hidden_imbalance_speedup(request):
    cfg = load_scenario(SCENARIOS / "hidden_imbalance.json")
    t0 = time.perf_counter()
    cmp = compare_modes(cfg)
    wall = time.perf_counter() - t0
    b, s = cmp.balanced, cmp.static
    note(request, f"static {s.makespan:.1f} s ({s.makespan / b.ideal_makespan:.3f}x ideal), "
                  f"balanced {b.makespan:.1f} s, ratio {cmp.makespan_ratio:.4f}, "
                  f"ideal {b.ideal_makespan:.1f} s, {wall:.2f} s wall")
    assert cfg.process_count == 4 and cfg.threads_per_process == 8
    assert s.makespan >= 1.15 * b.ideal_makespan
    assert b.makespan <= 0.95 * s.makespan
    assert b.makespan <= b.ideal_makespan + cfg.checkpoint_interval_s
    assert wall < 2.0


def test_criterion_5_closed_form_heterogeneous(request):
    cfg = load_scenario(SCENARIOS / "two_rank_hetero.json")
    cmp = compare_modes(cfg)
    b, s = cmp.balanced, cmp.static
    note(request, f"static {s.makespan:g} s, balanced {b.makespan:.2f} s, ideal {b.ideal_makespan:.2f} s")
    assert s.makespan == 300.0
    assert b.ideal_makespan == pytest.approx(200.0, abs=1e-9)
    assert 200.0 <= b.makespan <= 230.0


# -- 6: conservation -----------------------------------------------------------


def regression_configs() -> list[ScenarioConfig]:
    configs = [load_scenario(p) for p in sorted(SCENARIOS.glob("*.json"))]
    hetero = load_scenario(SCENARIOS / "two_rank_hetero.json")
    configs += [hetero.replace(name=f"hetero_jitter_{seed}", jitter=0.3, rng_seed=seed) for seed in range(4)]
    configs.append(ScenarioConfig(
        "three_rank_uneven", 3, 3, 90_000,
        tuple(tuple(C(v) for v in row) for row in ((10, 200, 40), (300, 5, 80), (60, 60, 60))),
        20.0, 3.0,
    ))
    return configs


def test_criterion_6_conservation_suite(request):
    checked = samples = 0
    worst = 0.0
    problems = []
    for cfg in regression_configs():
        r = run_scenario(cfg, "balanced")
        checked += 1
        samples += len(r.conservation)
        bad = [s for s in r.conservation if not s.ok]
        if bad:
            problems.append(f"{cfg.name}: {len(bad)} conservation violations, first {bad[0]}")
        if not r.conservation:
            problems.append(f"{cfg.name}: no samples recorded")
        if r.total_iterations < cfg.global_budget:
            problems.append(f"{cfg.name}: executed {r.total_iterations} < {cfg.global_budget}")
        if r.overshoot > r.overshoot_bound:
            problems.append(f"{cfg.name}: overshoot {r.overshoot} > bound {r.overshoot_bound:.2f}")
        if r.overshoot_bound > 0:
            worst = max(worst, r.overshoot / r.overshoot_bound)
    note(request, f"{checked} scenarios, {samples} samples, worst overshoot/bound {worst:.3f}"
         + ("; " + "; ".join(problems) if problems else ""))
    assert not problems


# -- 7: oracle equivalence -----------------------------------------------------


def thread_instance(rng: random.Random) -> tuple[bool, str]:
    n = rng.randint(1, 5)
    budget = rng.randint(n, 20_000)
    t_min = rng.choice([0.5, 5.0, rng.uniform(0.01, 60.0)])
    task = TaskState(1e9, t_min, clock=VirtualClock())
    task.start(n, budget, t=0.0)
    traces = [Trace(0.0) for _ in range(n)]
    t_end = 0.0
    for k in range(n):
        t, done = 0.0, 0
        cap = task.workers[k].assigned
        for _ in range(rng.randint(0, 3)):
            t += rng.uniform(0.05, 40.0)
            done = cap if rng.random() < 0.15 else rng.randint(done, cap)
            task.report(k, done, t)
            traces[k].reports.append((t, done))
        t_end = max(t_end, t)
    for k in range(n):
        if traces[k].reports and rng.random() < 0.25 and sum(not tr.finished for tr in traces) > 1:
            task.workers[k].finished = True
            traces[k].finished = True
    t_cp = t_end + rng.choice([0.0, rng.uniform(0.0, 30.0)])
    force = rng.random() < 0.2
    before = [w.assigned for w in task.workers]
    expected = checkpoint_oracle(traces, [thread_speed(tr) for tr in traces], budget, t_cp, t_min, force)
    plan = task.checkpoint(t_cp, force=force)
    after = [w.assigned for w in task.workers]
    want = [expected.assignments.get(k, before[k]) for k in range(n)]
    ok = plan.branch.value == expected.branch and plan.assignments == expected.assignments and after == want
    return ok, f"thread n={n} budget={budget} t={t_cp}: {plan.branch.value} {after} vs {expected.branch} {want}"


def coordinator_instance(rng: random.Random) -> tuple[bool, str]:
    p = rng.randint(1, 3)
    budget = rng.randint(p, 50_000)
    t_min = rng.choice([1.0, 5.0, rng.uniform(0.01, 40.0)])
    task = TaskState(30.0, t_min, clock=VirtualClock())
    task.ext = CoordTaskExt.for_coordinator(p, budget)
    share = budget // p
    for k, gw in enumerate(task.ext.guess_workers):
        gw.start(0.0, share + (1 if k < budget - share * p else 0))
    traces = [Trace(0.0) for _ in range(p)]
    clock = [0.0] * p
    preds = [0] * p
    expect = task.ext.assignments()
    frozen = False
    for step in range(rng.randint(1, 6)):
        k = rng.randrange(p)
        clock[k] += rng.uniform(0.1, 30.0)
        preds[k] = max(0, preds[k] + rng.randint(-200, budget // p))
        instr = rng.choice([Instruction.REPORT, Instruction.REPORT, Instruction.FINISH_REQUEST])
        out = receive_report(task, Message(instr, k, clock[k], preds[k]))
        if not frozen:
            traces[k].reports.append((clock[k], preds[k]))
            now = max(tr.last_time() for tr in traces)
            oracle = coordinator_oracle(traces, budget, now, t_min)
            if oracle.branch in ("finish", "hold"):
                frozen = True
            elif oracle.branch == "redistribute":
                expect = [oracle.assignments[j] for j in range(p)]
        got = task.ext.assignments()
        if got != expect or out.response.coord_finished != frozen or out.response.new_assignment != expect[k]:
            return False, (f"coordinator p={p} budget={budget} step {step}: "
                           f"{got} finished={out.response.coord_finished} vs {expect} finished={frozen}")
    return True, ""


def test_criterion_7_oracle_equivalence(request):
    rng = random.Random(20240611)
    failures = []
    branches: dict[str, int] = {}
    for i in range(1000):
        ok, why = (thread_instance if i % 2 == 0 else coordinator_instance)(rng)
        if not ok:
            failures.append(why)
        if why:
            branch = why.split(": ", 1)[1].split(" ", 1)[0] if ok else "mismatch"
            branches[branch] = branches.get(branch, 0) + 1
    note(request, f"1000 instances, {len(failures)} mismatches, thread branches "
         + ", ".join(f"{k} {v}" for k, v in sorted(branches.items()))
         + (f"; first: {failures[0]}" if failures else ""))
    assert not failures


# -- 8: liveness and homogeneous no-harm ---------------------------------------


def liveness_configs() -> list[ScenarioConfig]:
    rng = random.Random(8)
    configs = []
    for i in range(30):
        procs, threads = rng.randint(1, 4), rng.randint(1, 4)
        rates = [[10 ** rng.uniform(0.0, 4.0) for _ in range(threads)] for _ in range(procs)]
        if i % 5 == 0:
            rates[0][0], rates[-1][-1] = 1.0, 1e4
        total = sum(map(sum, rates))
        budget = max(int(total * rng.uniform(30.0, 300.0)), procs * threads)
        profiles = tuple(tuple(C(v) for v in row) for row in rates)
        configs.append(ScenarioConfig(f"live{i}", procs, threads, budget, profiles,
                                      rng.choice([10.0, 30.0]), jitter=rng.choice([0.0, 0.2]), rng_seed=i))
    return configs


def test_criterion_8_liveness_and_homogeneous_no_harm(request):
    live = liveness_configs()
    for cfg in live:
        r = run_scenario(cfg, "balanced")      # raises SimulationAborted on a stall
        assert r.total_iterations >= cfg.global_budget
    homo = [load_scenario(SCENARIOS / "homogeneous.json")] + [
        ScenarioConfig(f"homo{P}x{T}", P, T, P * T * s * 400, uniform_profiles(P, T, C(s)), 30.0, 5.0)
        for P, T, s in ((1, 4, 100), (2, 8, 100), (3, 2, 50), (4, 4, 1000), (2, 2, 1))
    ]
    ratios = {cfg.name: compare_modes(cfg).makespan_ratio for cfg in homo}
    note(request, f"{len(live)} bounded-speed scenarios terminated; homogeneous ratios "
         + ", ".join(f"{k} {v:.4f}" for k, v in ratios.items()) + " <= 1.02")
    assert all(v <= 1.02 for v in ratios.values())


# -- 9: real-thread demo -------------------------------------------------------


def demo(*args: str, **kw) -> subprocess.Popen:
    return subprocess.Popen(
        [sys.executable, "-m", "ruperlb", "demo", *args],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, **kw,
    )


def test_criterion_9_real_thread_demo(request, tmp_path):
    t0 = time.perf_counter()
    single = demo("--threads", "4", "--budget", "4000000", "--seed", "1", "--out", str(tmp_path / "single"))
    out, _ = single.communicate(timeout=60)
    m = re.search(r"pi estimate ([0-9.]+)", out)
    pi = float(m.group(1)) if m else math.nan

    root = demo("--threads", "2", "--budget", "1000000", "--listen", "127.0.0.1:0", "--procs", "2",
                "--out", str(tmp_path / "tcp"))
    first = root.stdout.readline()
    port = re.search(r"listening on [^:]+:(\d+)", first).group(1)
    peer = demo("--threads", "2", "--budget", "1000000", "--connect", f"127.0.0.1:{port}",
                "--rank", "1", "--procs", "2", "--out", str(tmp_path / "tcp"))
    peer_out, _ = peer.communicate(timeout=60)
    root_out, _ = root.communicate(timeout=60)
    wall = time.perf_counter() - t0
    global_ok = "[PASS] global_assignment_sum" in root_out and "[PASS] global_conservation_samples" in root_out
    note(request, f"pi {pi:.5f} (error {abs(pi - math.pi):.5f}), exit codes "
                  f"{single.returncode}/{root.returncode}/{peer.returncode}, "
                  f"global check {'ok' if global_ok else 'missing'}, {wall:.1f} s wall")
    assert single.returncode == 0, out
    assert abs(pi - 3.14159) < 0.01
    assert "[PASS] conservation_violations" in out
    assert root.returncode == 0, root_out
    assert peer.returncode == 0, peer_out
    assert global_ok
    assert (tmp_path / "tcp" / "demo_summary.csv").exists()
    assert (tmp_path / "tcp" / "demo_summary_rank1.csv").exists()
    assert wall < 30.0
