"""Assignment-conservation sampling for tasks and the coordinator.

After a redistributing checkpoint the working assignments plus what the
finished workers actually did must add up to the budget exactly; after a
finishing checkpoint they must cover it.  A :class:`ConservationRecorder`
hooks into a task's observers (and optionally the coordinator monitor)
and keeps one :class:`ConservationSample` per checkpoint or rebalance.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

from .balancer import Branch, TaskEvent, TaskState


@dataclass(frozen=True)
class ConservationSample:
    t: float
    scope: str          # "rank0", "rank1", ... or "global"
    branch: str
    assigned_sum: int   # working assignments plus done of finished workers
    budget: int

    @property
    def ok(self) -> bool:
        if self.branch == Branch.REDISTRIBUTE.value:
            return self.assigned_sum == self.budget
        if self.branch == Branch.STALLED.value:
            # no speeds to divide by: assignments wait for the next measure
            return True
        # finish and hold leave finished workers' overshoot in place
        return self.assigned_sum >= self.budget


def conservation_sum(workers) -> int:
    """Working assignments plus what finished workers actually did."""
    return sum(w.assigned if w.working() else w.done for w in workers if w.started)


class ConservationRecorder:
    def __init__(self) -> None:
        self.samples: list[ConservationSample] = []
        self._lock = threading.Lock()

    def _add(self, sample: ConservationSample) -> None:
        with self._lock:
            self.samples.append(sample)

    def attach_task(self, task: TaskState, rank: int) -> None:
        def observe(ev: TaskEvent) -> None:
            if ev.kind == "checkpoint":
                self._add(ConservationSample(
                    ev.t, f"rank{rank}", ev.detail.branch.value,
                    conservation_sum(task.workers), task.budget,
                ))
        task.observers.append(observe)

    def coordinator_observer(self, task: TaskState):
        """Observer for :class:`~ruperlb.coordinator.CoordinatorMonitor`."""
        def observe(kind: str, origin: int, outcome) -> None:
            if outcome.plan is None:
                return
            ext = task.ext
            self._add(ConservationSample(
                task.clock.now(), "global", outcome.plan.branch.value,
                sum(gw.assigned for gw in ext.guess_workers), ext.global_budget,
            ))
        return observe

    @property
    def violations(self) -> list[ConservationSample]:
        return [s for s in self.samples if not s.ok]
