"""Exception hierarchy shared across the library.

Exit-code classes used by the CLI:

* config errors (bad arguments, bad config files)      -> exit 2
* data errors (parse failures, malformed datasets)     -> exit 3
* numeric errors (singular systems, corrupted state)   -> exit 4
* training divergence                                  -> exit 5
"""


class InvioError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(InvioError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(InvioError):
    """Configuration file is malformed or contains unknown keys."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DataFormatError(InvioError):
    """Input data file is malformed (bad row, bad units, non-monotone time)."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += str(path)
        if line is not None:
            prefix += f":{line}"
        if prefix:
            message = f"{prefix}: {message}"
        super().__init__(message)


class NumericError(InvioError):
    """A numeric operation failed (singular matrix, log branch failure)."""


class NumericDomainError(NumericError):
    """A value left the domain where an operation is defined."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class StateCorruptionError(NumericError):
    """Filter covariance lost symmetry/positive semi-definiteness."""


class DegenerateGeometryError(InvioError):
    """Feature geometry is too weak to triangulate (no baseline, rank loss)."""


class CheiralityError(InvioError):
    """A triangulated landmark lies behind one of the cameras."""


class ConvergenceError(InvioError):
    """An iterative solver exhausted its iteration budget."""


class TrainingDivergedError(InvioError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class InsufficientDataError(InvioError):
    """Not enough associated samples/distance to compute a metric."""
