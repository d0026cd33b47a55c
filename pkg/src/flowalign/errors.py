"""Exception types shared across the package."""


class FlowAlignError(Exception):
    """Base class; ``category`` becomes the CLI diagnostic prefix."""

    category = "error"


class ConfigError(FlowAlignError, ValueError):
    category = "config"


class ShapeError(FlowAlignError, ValueError):
    category = "shape"


class NumericError(FlowAlignError, ArithmeticError):
    category = "numeric"


class ScheduleError(ConfigError):
    category = "schedule"
