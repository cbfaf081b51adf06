"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: config problems exit 2,
data problems exit 3, stage-ordering violations exit 4.
"""


class RegsurvError(Exception):
    """Base class for all package errors."""


class ConfigError(RegsurvError):
    """Invalid or unresolvable configuration (exit code 2)."""


class DataError(RegsurvError):
    """Bad or insufficient input data (exit code 3)."""


class ParseError(DataError):
    """A dataset file could not be parsed; message names the offending line."""


class ValidationError(DataError):
    """A record violates a type invariant; message names the sample id."""


class OrderingError(RegsurvError):
    """Training stages invoked out of order (exit code 4)."""


class ShapeError(RegsurvError):
    """Tensor shape does not match the declared contract."""


class ContractError(RegsurvError):
    """An operation was called before its preconditions were established."""


class CompletionError(RegsurvError):
    """Region completion is impossible (no detected regions to anchor on)."""


class LossError(RegsurvError):
    """A loss is undefined for the given batch (e.g. no events)."""


class MetricError(RegsurvError):
    """A metric is undefined for the given inputs (e.g. no comparable pairs)."""


class EvaluationError(RegsurvError):
    """Model state is unusable for evaluation (e.g. NaN parameters)."""


EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ORDERING = 4
