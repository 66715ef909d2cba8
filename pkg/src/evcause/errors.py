"""Exception types shared across the package."""


class EvcauseError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EvcauseError, ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class ParameterError(EvcauseError, ValueError):
    """An argument value is outside its valid domain."""


class IngestionError(EvcauseError, ValueError):
    """A data file could not be parsed; the message carries the line number."""


class ConfigError(EvcauseError, ValueError):
    """A configuration is invalid or contains unknown keys."""


class ConsistencyError(EvcauseError, ValueError):
    """Two structures that must be keyed identically disagree."""


class MetricError(EvcauseError, ValueError):
    """A metric is undefined for the given inputs (e.g. no treated samples)."""


class TrainingError(EvcauseError, RuntimeError):
    """Training aborted, typically on a non-finite loss."""


class CheckpointError(EvcauseError, ValueError):
    """A checkpoint file is unreadable, truncated, or shape-incompatible."""
