"""Balanced versus static runs of the same scenario."""
from __future__ import annotations

from dataclasses import dataclass

from .engine import ScenarioResult, run_scenario
from .scenario import ScenarioConfig


@dataclass(frozen=True)
class ModeComparison:
    balanced: ScenarioResult
    static: ScenarioResult

    @property
    def makespan_ratio(self) -> float:
        """Balanced makespan over static makespan (below 1 means balancing helped)."""
        return self.balanced.makespan / self.static.makespan

    @property
    def rank_spread(self) -> dict[str, float]:
        return {"balanced": self.balanced.rank_spread, "static": self.static.rank_spread}

    @property
    def thread_spreads(self) -> dict[str, list[float]]:
        return {"balanced": self.balanced.thread_spreads, "static": self.static.thread_spreads}

    def result(self, mode: str) -> ScenarioResult:
        return self.balanced if mode == "balanced" else self.static


def compare_modes(cfg: ScenarioConfig) -> ModeComparison:
    return ModeComparison(
        balanced=run_scenario(cfg, "balanced"),
        static=run_scenario(cfg, "static"),
    )
