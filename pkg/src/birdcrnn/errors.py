"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and
subclasses) -> 2, NumericError -> 3.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration or argument combination."""


class DataError(PipelineError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """A file exists but is not in a supported format."""


class TruncatedError(DataError):
    """A file ended before its declared payload."""


class ShapeError(DataError):
    """Tensor or matrix dimensions violate an operation's contract."""


class MetricError(DataError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class NumericError(PipelineError):
    """A computation produced a non-finite value."""
