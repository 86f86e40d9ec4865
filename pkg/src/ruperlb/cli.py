"""Command line entry point: ``run``, ``validate`` and ``demo``.

Exit status: 0 when every check passes, 1 when a check fails, 2 for a
configuration or file error, 3 when a run aborts.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ProtocolError, SimulationAborted
from .simulator import compare_modes, load_scenario, run_scenario
from .simulator.output import SUMMARY_HEADER, write_summary_csv, write_timeline_csv
from .simulator.scenario import Check

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_ABORT = 3

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

logger = logging.getLogger("ruperlb")


@dataclass
class CheckOutcome:
    name: str
    bound: str
    observed: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: observed {_fmt(self.observed)}, bound {self.bound}"


@dataclass
class RunReport:
    scenario: str
    modes: list[str]
    checks: list[CheckOutcome] = field(default_factory=list)
    csv_paths: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = [f"scenario {self.scenario} ({', '.join(self.modes)})"]
        out += [c.line() for c in self.checks]
        out += [f"wrote {p}" for p in self.csv_paths]
        out.append("result: " + ("PASS" if self.passed else "FAIL"))
        return out


def _fmt(x: float) -> str:
    if isinstance(x, int) or (isinstance(x, float) and x.is_integer() and abs(x) < 1e15):
        return str(int(x))
    return f"{x:.6g}"


def evaluate(name: str, observed: float, lo: float | None = None, hi: float | None = None) -> CheckOutcome:
    """Pass iff ``lo <= observed <= hi`` for the bounds given; NaN never passes."""
    if lo is not None and hi is not None:
        bound = f"== {_fmt(lo)}" if lo == hi else f"in [{_fmt(lo)}, {_fmt(hi)}]"
    elif hi is not None:
        bound = f"<= {_fmt(hi)}"
    elif lo is not None:
        bound = f">= {_fmt(lo)}"
    else:
        raise ValueError(f"check {name} has no bound")
    ok = not math.isnan(observed)
    if lo is not None:
        ok = ok and observed >= lo
    if hi is not None:
        ok = ok and observed <= hi
    return CheckOutcome(name, bound, observed, ok)


def builtin_checks(result) -> list[CheckOutcome]:
    """Conservation and coverage checks every run gets."""
    m = result.mode
    budget = result.global_budget
    if m == "static":
        return [evaluate("static.total_iterations", result.total_iterations, budget, budget)]
    return [
        evaluate(f"{m}.conservation_violations", result.conservation_violations, hi=0),
        evaluate(f"{m}.total_iterations", result.total_iterations, lo=budget),
        evaluate(f"{m}.overshoot", result.overshoot, hi=result.overshoot_bound),
    ]


def _needed_modes(cfg, mode: str) -> tuple[list[str], list[str]]:
    """Modes whose CSVs are written, and every mode the checks need."""
    shown = ["balanced", "static"] if mode == "both" else [mode]
    needed = set(shown)
    for c in cfg.checks:
        needed.add(c.mode)
        if c.metric == "makespan_ratio":
            needed.update(("balanced", "static"))
    return shown, [m for m in ("balanced", "static") if m in needed]


def _scenario_check(check: Check, results: dict, comparison) -> CheckOutcome:
    if check.metric == "makespan_ratio":
        observed = comparison.makespan_ratio
    else:
        observed = results[check.mode].metric(check.metric)
    return evaluate(check.label, observed, check.min, check.max)


def cmd_run(scenario_path: str, output_dir: str, mode_override: str | None = None,
            seed_override: int | None = None) -> int:
    cfg = load_scenario(scenario_path)
    if seed_override is not None:
        cfg = cfg.replace(rng_seed=seed_override)
    mode = mode_override or cfg.mode
    shown, needed = _needed_modes(cfg, mode)
    comparison = None
    if len(needed) == 2:
        comparison = compare_modes(cfg)
        results = {"balanced": comparison.balanced, "static": comparison.static}
    else:
        results = {needed[0]: run_scenario(cfg, needed[0])}

    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    report = RunReport(cfg.name, shown)
    report.csv_paths.append(write_summary_csv([results[m] for m in shown], out / "summary.csv"))
    timeline_name = "timeline.csv"
    for m in shown:
        name = timeline_name if len(shown) == 1 else f"timeline_{m}.csv"
        report.csv_paths.append(write_timeline_csv(results[m], out / name))
    if len(shown) == 2:
        # timeline.csv always exists; with both modes it holds the balanced run.
        report.csv_paths.append(write_timeline_csv(results["balanced"], out / timeline_name))

    for m in needed:
        report.checks += builtin_checks(results[m])
    for check in cfg.checks:
        report.checks.append(_scenario_check(check, results, comparison))

    for m in shown:
        r = results[m]
        print(f"{m}: makespan {r.makespan:.3f} s (ideal {r.ideal_makespan:.3f} s), "
              f"rank spread {r.rank_spread:.3f} s, thread spread {r.thread_spread:.3f} s, "
              f"iterations {r.total_iterations}")
        if logger.isEnabledFor(logging.DEBUG):
            for row in r.timeline:
                logger.debug("%s t=%.6f rank=%d thread=%d %s %s", m, *row)
    if comparison is not None and len(shown) == 2:
        print(f"makespan ratio (balanced/static): {comparison.makespan_ratio:.4f}")
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_validate(scenario_path: str) -> int:
    cfg = load_scenario(scenario_path)
    print(json.dumps(cfg.to_dict(), indent=2))
    return EXIT_OK


def parse_address(text: str) -> tuple[str, int]:
    """``host:port``, ``:port`` or ``port``; the host defaults to 127.0.0.1."""
    host, sep, port = text.rpartition(":")
    if not sep:
        host = ""
    try:
        value = int(port)
    except ValueError:
        raise ConfigError(f"bad address {text!r}: port must be an integer", "address") from None
    if not 0 <= value < 65536:
        raise ConfigError(f"bad address {text!r}: port out of range", "address")
    return host or "127.0.0.1", value


def write_demo_summary(result, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for k, t in enumerate(result.threads):
            writer.writerow(("demo", "balanced", result.rank, k, f"{t.finish_s:.6f}", t.iterations))
    return path


def cmd_demo(args: argparse.Namespace) -> int:
    from .demo import DemoConfig, run_demo
    from .balancer import validate_parameters

    if args.threads < 1:
        raise ConfigError("threads must be at least 1", "threads")
    if args.budget < args.threads:
        raise ConfigError("budget must be at least the thread count", "budget")
    tmin = args.tmin if args.tmin is not None else args.dtpc / 6.0
    validate_parameters(args.dtpc, tmin, args.dsmax)
    listen = parse_address(args.listen) if args.listen else None
    connect = parse_address(args.connect) if args.connect else None
    if connect is None and args.rank != 0:
        raise ConfigError("--rank only applies together with --connect", "rank")
    if connect is not None and args.rank < 1:
        raise ConfigError("--connect needs --rank K with K >= 1", "rank")
    if (listen or connect) and args.procs < 2:
        raise ConfigError("--listen/--connect need --procs P with P >= 2", "procs")
    if connect is not None and args.rank >= args.procs:
        raise ConfigError(f"rank {args.rank} out of range for {args.procs} processes", "rank")

    cfg = DemoConfig(
        threads=args.threads, budget=args.budget, checkpoint_interval=args.dtpc,
        remaining_time_threshold=tmin, max_speed_deviation=args.dsmax, seed=args.seed,
        listen=listen, connect=connect, rank=args.rank if connect else 0,
        process_count=args.procs if (listen or connect) else 1,
    )

    def announce(host: str, port: int) -> None:
        print(f"listening on {host}:{port}", flush=True)

    result = run_demo(cfg, on_listening=announce)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = "demo_summary.csv" if result.rank == 0 else f"demo_summary_rank{result.rank}.csv"
    path = write_demo_summary(result, out / name)

    print(f"rank {result.rank}: pi estimate {result.pi_estimate:.6f} "
          f"(error {abs(result.pi_estimate - math.pi):.6f}) from {result.iterations} points")
    for k, t in enumerate(result.threads):
        print(f"  thread {k}: {t.iterations} iterations, finished at {t.finish_s:.3f} s")
    print(f"finish-time spread {result.finish_spread:.3f} s, reassignments {result.reassignments}")

    report = RunReport("demo", ["balanced"], csv_paths=[path])
    samples = result.conservation.samples
    report.checks.append(evaluate("conservation_violations", len(result.conservation.violations), hi=0))
    if cfg.process_count == 1:
        report.checks.append(evaluate("total_iterations", result.iterations, lo=cfg.budget))
    elif result.rank == 0:
        assigned = sum(result.extra.get("assignments", []))
        report.checks.append(evaluate("global_assignment_sum", assigned, lo=cfg.budget))
        report.checks.append(evaluate(
            "global_conservation_samples", sum(1 for s in samples if s.scope == "global"), lo=1,
        ))
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ruperlb", description="Two-level iteration load balancer.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario in the simulator")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--out", required=True, help="directory for summary.csv and timeline.csv")
    run.add_argument("--mode", choices=("balanced", "static", "both"), help="override the scenario mode")
    run.add_argument("--seed", type=int, help="override the scenario rng_seed")

    val = sub.add_parser("validate", help="check a scenario file and print it normalized")
    val.add_argument("--scenario", required=True, help="scenario JSON file")

    demo = sub.add_parser("demo", help="Monte Carlo pi on real threads")
    demo.add_argument("--threads", type=int, required=True)
    demo.add_argument("--budget", type=int, required=True, help="global number of points")
    demo.add_argument("--dtpc", type=float, default=0.2, help="checkpoint interval in seconds")
    demo.add_argument("--tmin", type=float, help="remaining-time threshold (default dtpc/6)")
    demo.add_argument("--dsmax", type=float, default=0.2, help="maximum speed deviation")
    demo.add_argument("--seed", type=int, default=1)
    demo.add_argument("--out", default=".", help="directory for demo_summary.csv")
    net = demo.add_mutually_exclusive_group()
    net.add_argument("--listen", metavar="ADDR", help="act as rank 0 and accept peers on ADDR")
    net.add_argument("--connect", metavar="ADDR", help="join the coordinator at ADDR")
    demo.add_argument("--rank", type=int, default=0)
    demo.add_argument("--procs", type=int, default=1)
    return parser


def configure_logging() -> None:
    value = os.environ.get("RUPERLB_LOG", "error").strip().lower()
    if value not in LOG_LEVELS:
        raise ConfigError(f"RUPERLB_LOG must be one of {', '.join(LOG_LEVELS)}", "RUPERLB_LOG")
    logging.basicConfig(level=LOG_LEVELS[value], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging()
        if args.command == "run":
            return cmd_run(args.scenario, args.out, args.mode, args.seed)
        if args.command == "validate":
            return cmd_validate(args.scenario)
        return cmd_demo(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, ProtocolError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
