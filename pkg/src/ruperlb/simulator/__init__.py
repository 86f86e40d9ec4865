"""Deterministic discrete-event harness for the balancer."""
from __future__ import annotations

from .compare import ModeComparison, compare_modes
from ..conservation import ConservationSample
from .engine import ScenarioResult, ideal_makespan, run_scenario, run_static
from .profiles import JitteredProfile, SpeedProfile, integrate_iterations, profile_speed
from .scenario import Check, ScenarioConfig, config_from_dict, load_scenario, uniform_profiles

__all__ = [
    "Check",
    "ConservationSample",
    "JitteredProfile",
    "ModeComparison",
    "ScenarioConfig",
    "ScenarioResult",
    "SpeedProfile",
    "compare_modes",
    "config_from_dict",
    "ideal_makespan",
    "integrate_iterations",
    "load_scenario",
    "profile_speed",
    "run_scenario",
    "run_static",
    "uniform_profiles",
]
