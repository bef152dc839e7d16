"""Exception hierarchy shared by all modules."""


class TamerError(Exception):
    """Base class for all package errors."""


class ShapeError(TamerError):
    """Array shapes do not conform to an operation's contract."""


class NumericError(TamerError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(TamerError):
    """A caller violated an API precondition (bad ids, non-scalar loss, ...)."""


class ConfigError(TamerError):
    """An invalid configuration value or combination."""


class DataError(TamerError):
    """Malformed or insufficient data (missing labels, empty splits, ...)."""


class GenerationError(TamerError):
    """The synthetic cohort generator could not satisfy its spec."""


class MetricUndefined(TamerError):
    """A metric has no defined value for the given label composition."""
