"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class LoadcastError(Exception):
    exit_code = 1


class ValidationError(LoadcastError, ValueError):
    """Bad configuration or input data, detected before any compute."""

    exit_code = 2


class ConfigurationError(ValidationError):
    pass


class TopologyError(ValidationError):
    pass


class NumericalError(LoadcastError, ArithmeticError):
    """A solve, factorization or consistency check failed."""

    exit_code = 3


class IllConditionedError(NumericalError):
    pass


class FittingError(NumericalError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class OutOfRangeError(NumericalError):
    pass


class DataIOError(LoadcastError, OSError):
    exit_code = 4
