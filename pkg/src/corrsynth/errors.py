"""Exception types raised across the package."""


class CorrsynthError(Exception):
    """Base class for all package errors."""


class DomainError(CorrsynthError, ValueError):
    """A stimulus level falls outside the device domain."""


class DesignError(CorrsynthError, ValueError):
    """A weighting or schedule cannot be constructed from the given inputs."""


class CoverageError(CorrsynthError, ValueError):
    """A nonzero weight sits at a stimulus level the schedule never visits."""


class ResolutionError(CorrsynthError, ValueError):
    """A discretisation is too coarse for the requested accuracy."""


class PackingError(DesignError):
    """Ascending and descending trajectory mass of a dynamic weighting differ."""

    def __init__(self, up: float, down: float):
        self.up = up
        self.down = down
        super().__init__(
            f"balanced packing violated: ascending sum {up:.12g} != descending sum {down:.12g}"
        )


class AliasingError(CorrsynthError, ValueError):
    """Control sweep is faster than the aliasing limit pi / (T * omega_B)."""

    def __init__(self, rate: float, limit: float):
        self.rate = rate
        self.limit = limit
        super().__init__(
            f"control sweep rate {rate:.6g} exceeds aliasing limit pi/(T*omega_B) = {limit:.6g}"
        )


class AlignmentError(CorrsynthError, ValueError):
    """Slot boundaries do not coincide with schedule segment boundaries."""


class CalibrationError(CorrsynthError, ValueError):
    """A systematic-error budget cannot be met by tuning."""


class ConfigError(CorrsynthError, ValueError):
    """Experiment configuration failed validation.

    ``problems`` maps each offending key to the violated constraint.
    """

    def __init__(self, problems: dict):
        self.problems = dict(problems)
        lines = "; ".join(f"{k}: {v}" for k, v in self.problems.items())
        super().__init__(f"invalid config: {lines}")
