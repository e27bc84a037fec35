"""Exception hierarchy shared by every module of the package."""


class PDACError(Exception):
    """Base class for all package errors."""


class InputError(PDACError, ValueError):
    """Rejected input: wrong shape, out-of-range parameter, empty batch."""


class InsufficientDataError(InputError):
    """Fewer data points than mixture components."""


class InfeasibleAllocationError(InputError):
    """Buffer capacity cannot cover the requested number of tasks."""


class StateError(PDACError, RuntimeError):
    """Operation requires state that does not exist yet (e.g. an uninitialized class model)."""


class DegenerateCovarianceError(PDACError, ArithmeticError):
    """A covariance matrix failed Cholesky factorization even after regularization."""


class FeatureFileError(PDACError, ValueError):
    """Malformed feature file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int, path=None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
