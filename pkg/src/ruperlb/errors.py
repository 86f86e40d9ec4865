"""Exception types raised across the package."""


class RuperLBError(Exception):
    """Base class for every error raised by this package."""


class ClockRegressionError(RuperLBError, ValueError):
    """A timestamp went backwards (or did not advance where it must)."""


class IterationRegressionError(RuperLBError, ValueError):
    """A worker reported fewer completed iterations than already registered."""


class ProtocolError(RuperLBError):
    """Malformed frame, unexpected message, or a broken transport."""


class ConfigError(RuperLBError, ValueError):
    """Invalid scenario or balancer configuration.

    ``key`` names the offending entry (``profiles[1][0].base_speed``) and
    ``line`` the source line when it is known.
    """

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key:
            where.append(f"key '{key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class SimulationAborted(RuperLBError):
    """The simulated run exceeded its virtual-time cap without finishing."""
