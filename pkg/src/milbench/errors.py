"""Exception types shared across the package."""


class MilbenchError(Exception):
    pass


class ParameterError(MilbenchError, ValueError):
    """Invalid argument value or inconsistent shapes."""


class EmptyBagError(ParameterError):
    pass


class SingularSystemError(MilbenchError, ArithmeticError):
    pass


class UndefinedMetricError(MilbenchError, ValueError):
    """Metric undefined for the given labels (e.g. a single class)."""


class ConfigError(MilbenchError, ValueError):
    pass


class DataMismatchError(MilbenchError, ValueError):
    """Dataset and generator parameters disagree."""
