"""Two-level iteration load balancer: threads within a process, processes under a coordinator."""
from __future__ import annotations

from .balancer import (
    BalancePlan,
    Branch,
    SpeedMeasure,
    TaskEvent,
    TaskState,
    Verdict,
    WorkerState,
    plan_redistribution,
    proportional_split,
    suggest_interval,
    validate_parameters,
)
from .clock import Clock, MonotonicClock, VirtualClock
from .coordinator import (
    CoordinatorMonitor,
    CoordTaskExt,
    GuessWorker,
    Instruction,
    LoopbackBridge,
    Message,
    ReportRequest,
    Response,
    WorkerMonitor,
    receive_report,
)
from .errors import (
    ClockRegressionError,
    ConfigError,
    IterationRegressionError,
    ProtocolError,
    RuperLBError,
    SimulationAborted,
)

__version__ = "0.1.0"

__all__ = [
    "BalancePlan", "Branch", "Clock", "ClockRegressionError", "ConfigError", "CoordTaskExt",
    "CoordinatorMonitor", "GuessWorker", "Instruction", "IterationRegressionError",
    "LoopbackBridge", "Message", "MonotonicClock", "ProtocolError", "ReportRequest", "Response",
    "RuperLBError", "SimulationAborted", "SpeedMeasure", "TaskEvent", "TaskState", "Verdict",
    "VirtualClock", "WorkerMonitor", "WorkerState", "plan_redistribution", "proportional_split",
    "receive_report", "suggest_interval", "validate_parameters",
]
