"""Scenario documents: topology, balancer parameters and speed profiles.

A scenario is a JSON object whose keys mirror :class:`ScenarioConfig`::

    {
      "name": "two_rank_hetero",
      "process_count": 2,
      "threads_per_process": 2,
      "global_budget": 60000,
      "checkpoint_interval_s": 30,
      "remaining_time_threshold_s": 5,
      "profiles": [
        {"kind": "constant", "base_speed": 100},
        [{"kind": "constant", "base_speed": 50}, {"kind": "constant", "base_speed": 50}]
      ],
      "mode": "both",
      "checks": [{"metric": "rank_spread", "mode": "balanced", "max": 30}]
    }

``profiles`` is one profile for every thread, or one entry per process,
each either a profile for all its threads or a list with one per thread.
"""
from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from .profiles import KINDS, SpeedProfile

MODES = ("balanced", "static", "both")
METRICS = (
    "makespan",
    "rank_spread",
    "thread_spread",
    "relative_rank_spread",
    "total_iterations",
    "overshoot",
    "conservation_violations",
    "makespan_ratio",
    "ideal_makespan",
)


@dataclass(frozen=True)
class Check:
    """An acceptance bound evaluated on a finished run."""

    metric: str
    mode: str = "balanced"
    max: float | None = None
    min: float | None = None
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"{self.mode}.{self.metric}"


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    process_count: int
    threads_per_process: int
    global_budget: int
    profiles: tuple[tuple[SpeedProfile, ...], ...]
    checkpoint_interval_s: float = 30.0
    remaining_time_threshold_s: float | None = None
    max_speed_deviation: float = 0.2
    initial_report_interval_s: float | None = None
    rng_seed: int = 0
    jitter: float = 0.0
    jitter_interval_s: float = 10.0
    mode: str = "balanced"
    checks: tuple[Check, ...] = ()
    max_time_factor: float = 100.0

    def __post_init__(self) -> None:
        if self.remaining_time_threshold_s is None:
            object.__setattr__(self, "remaining_time_threshold_s", self.checkpoint_interval_s / 6.0)
        if self.initial_report_interval_s is None:
            object.__setattr__(self, "initial_report_interval_s", self.checkpoint_interval_s / 6.0)
        _validate(self)

    @property
    def thread_count(self) -> int:
        return self.process_count * self.threads_per_process

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "process_count": self.process_count,
            "threads_per_process": self.threads_per_process,
            "global_budget": self.global_budget,
            "checkpoint_interval_s": self.checkpoint_interval_s,
            "remaining_time_threshold_s": self.remaining_time_threshold_s,
            "max_speed_deviation": self.max_speed_deviation,
            "initial_report_interval_s": self.initial_report_interval_s,
            "rng_seed": self.rng_seed,
            "jitter": self.jitter,
            "jitter_interval_s": self.jitter_interval_s,
            "mode": self.mode,
            "max_time_factor": self.max_time_factor,
            "profiles": [[p.to_dict() for p in row] for row in self.profiles],
            "checks": [
                {k: v for k, v in dataclasses.asdict(c).items() if v not in (None, "")}
                for c in self.checks
            ],
        }


def uniform_profiles(process_count: int, threads_per_process: int, profile: SpeedProfile) -> tuple[tuple[SpeedProfile, ...], ...]:
    return tuple(tuple(profile for _ in range(threads_per_process)) for _ in range(process_count))


def _validate(cfg: ScenarioConfig) -> None:
    for key in ("process_count", "threads_per_process", "global_budget"):
        value = getattr(cfg, key)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ConfigError(f"{key} must be an integer >= 1", key)
    if cfg.global_budget < cfg.thread_count:
        raise ConfigError(
            f"global_budget {cfg.global_budget} is smaller than the {cfg.thread_count} threads",
            "global_budget",
        )
    if not cfg.checkpoint_interval_s > 0:
        raise ConfigError("checkpoint_interval_s must be positive", "checkpoint_interval_s")
    if not cfg.remaining_time_threshold_s > 0:
        raise ConfigError("remaining_time_threshold_s must be positive", "remaining_time_threshold_s")
    if not 0 < cfg.max_speed_deviation < 1:
        raise ConfigError("max_speed_deviation must be in (0,1)", "max_speed_deviation")
    if not cfg.initial_report_interval_s > 0:
        raise ConfigError("initial_report_interval_s must be positive", "initial_report_interval_s")
    if cfg.jitter < 0:
        raise ConfigError("jitter must be non-negative", "jitter")
    if not cfg.jitter_interval_s > 0:
        raise ConfigError("jitter_interval_s must be positive", "jitter_interval_s")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}", "mode")
    if not cfg.max_time_factor > 1:
        raise ConfigError("max_time_factor must exceed 1", "max_time_factor")
    if len(cfg.profiles) != cfg.process_count:
        raise ConfigError(f"expected {cfg.process_count} profile rows, got {len(cfg.profiles)}", "profiles")
    for r, row in enumerate(cfg.profiles):
        if len(row) != cfg.threads_per_process:
            raise ConfigError(
                f"expected {cfg.threads_per_process} profiles, got {len(row)}", f"profiles[{r}]"
            )
    for k, check in enumerate(cfg.checks):
        if check.metric not in METRICS:
            raise ConfigError(f"unknown metric {check.metric!r}", f"checks[{k}].metric")
        if check.mode not in ("balanced", "static"):
            raise ConfigError("check mode must be balanced or static", f"checks[{k}].mode")
        if check.max is None and check.min is None:
            raise ConfigError("a check needs max and/or min", f"checks[{k}]")


# -- parsing -------------------------------------------------------------------


def _line_of(text: str, key: str | None) -> int | None:
    if not text or not key:
        return None
    last = re.findall(r"[A-Za-z_]+", key)
    if not last:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(last[-1]), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _number(obj: dict, key: str, path: str, default=None, integer: bool = False):
    if key not in obj:
        if default is None:
            raise ConfigError("missing required key", f"{path}{key}")
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {type(value).__name__}", f"{path}{key}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError("expected an integer", f"{path}{key}")
        return int(value)
    if not math.isfinite(value):
        raise ConfigError("expected a finite number", f"{path}{key}")
    return float(value)


def _pairs(value, path: str) -> tuple[tuple[float, float], ...]:
    if not isinstance(value, list):
        raise ConfigError("expected a list of [time, multiplier] pairs", path)
    out = []
    for k, item in enumerate(value):
        if not (isinstance(item, list) and len(item) == 2 and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in item)):
            raise ConfigError("expected a [time, multiplier] pair", f"{path}[{k}]")
        out.append((float(item[0]), float(item[1])))
    return tuple(out)


def parse_profile(obj, path: str) -> SpeedProfile:
    if not isinstance(obj, dict):
        raise ConfigError("expected a profile object", path)
    kind = obj.get("kind", "constant")
    if kind not in KINDS:
        raise ConfigError(f"unknown profile kind {kind!r}", f"{path}.kind")
    base = _number(obj, "base_speed", f"{path}.")
    try:
        if kind == "constant":
            return SpeedProfile.constant(base)
        if kind == "step_schedule":
            return SpeedProfile("step_schedule", base, steps=_pairs(obj.get("steps", []), f"{path}.steps"))
        if kind == "table":
            return SpeedProfile("table", base, table=_pairs(obj.get("table", []), f"{path}.table"))
        return SpeedProfile.sinusoidal(
            base,
            _number(obj, "amplitude", f"{path}.", 0.0),
            _number(obj, "period", f"{path}."),
            _number(obj, "phase", f"{path}.", 0.0),
        )
    except ConfigError as exc:
        if exc.key and not exc.key.startswith(path):
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{exc.key}") from None
        raise


def _parse_profiles(value, process_count: int, threads: int) -> tuple[tuple[SpeedProfile, ...], ...]:
    if isinstance(value, dict):
        p = parse_profile(value, "profiles")
        return uniform_profiles(process_count, threads, p)
    if not isinstance(value, list):
        raise ConfigError("expected a profile or a list of per-process profiles", "profiles")
    if len(value) != process_count:
        raise ConfigError(f"expected {process_count} entries, got {len(value)}", "profiles")
    rows = []
    for r, entry in enumerate(value):
        if isinstance(entry, dict):
            p = parse_profile(entry, f"profiles[{r}]")
            rows.append(tuple(p for _ in range(threads)))
        elif isinstance(entry, list):
            if len(entry) != threads:
                raise ConfigError(f"expected {threads} thread profiles, got {len(entry)}", f"profiles[{r}]")
            rows.append(tuple(parse_profile(e, f"profiles[{r}][{k}]") for k, e in enumerate(entry)))
        else:
            raise ConfigError("expected a profile or a list of profiles", f"profiles[{r}]")
    return tuple(rows)


def _parse_checks(value) -> tuple[Check, ...]:
    if not isinstance(value, list):
        raise ConfigError("expected a list of checks", "checks")
    out = []
    for k, item in enumerate(value):
        if not isinstance(item, dict) or "metric" not in item:
            raise ConfigError("a check is an object with at least a metric", f"checks[{k}]")
        unknown = set(item) - {"metric", "mode", "max", "min", "name"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", f"checks[{k}]")
        out.append(Check(
            metric=str(item["metric"]),
            mode=str(item.get("mode", "balanced")),
            max=_number(item, "max", f"checks[{k}].", float("nan")) if "max" in item else None,
            min=_number(item, "min", f"checks[{k}].", float("nan")) if "min" in item else None,
            name=str(item.get("name", "")),
        ))
    return tuple(out)


_KNOWN = {
    "name", "process_count", "threads_per_process", "global_budget", "checkpoint_interval_s",
    "remaining_time_threshold_s", "max_speed_deviation", "initial_report_interval_s",
    "rng_seed", "jitter", "jitter_interval_s", "mode", "checks", "profiles", "max_time_factor",
}


def config_from_dict(data, text: str = "") -> ScenarioConfig:
    """Build a validated config; errors carry the offending key (and line when ``text`` is given)."""
    try:
        if not isinstance(data, dict):
            raise ConfigError("scenario must be a JSON object")
        unknown = set(data) - _KNOWN
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", sorted(unknown)[0])
        processes = _number(data, "process_count", "", integer=True)
        threads = _number(data, "threads_per_process", "", integer=True)
        if processes < 1:
            raise ConfigError("process_count must be an integer >= 1", "process_count")
        if threads < 1:
            raise ConfigError("threads_per_process must be an integer >= 1", "threads_per_process")
        if "profiles" not in data:
            raise ConfigError("missing required key", "profiles")
        optional = {}
        for key in ("remaining_time_threshold_s", "initial_report_interval_s"):
            if key in data:
                optional[key] = _number(data, key, "")
        return ScenarioConfig(
            name=str(data.get("name", "scenario")),
            process_count=processes,
            threads_per_process=threads,
            global_budget=_number(data, "global_budget", "", integer=True),
            profiles=_parse_profiles(data["profiles"], processes, threads),
            checkpoint_interval_s=_number(data, "checkpoint_interval_s", "", 30.0),
            max_speed_deviation=_number(data, "max_speed_deviation", "", 0.2),
            rng_seed=_number(data, "rng_seed", "", 0, integer=True),
            jitter=_number(data, "jitter", "", 0.0),
            jitter_interval_s=_number(data, "jitter_interval_s", "", 10.0),
            mode=str(data.get("mode", "balanced")),
            checks=_parse_checks(data.get("checks", [])),
            max_time_factor=_number(data, "max_time_factor", "", 100.0),
            **optional,
        )
    except ConfigError as exc:
        if exc.line is None and text:
            line = _line_of(text, exc.key)
            if line is not None:
                raise ConfigError(str(exc).split(": ", 1)[-1] if exc.key else str(exc), exc.key, line) from None
        raise


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from None
    return config_from_dict(data, text)
