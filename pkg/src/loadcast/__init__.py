"""Two-stage probabilistic load forecasting from phase-angle measurements."""
from .errors import (
    ConfigurationError,
    DataIOError,
    FittingError,
    IllConditionedError,
    LoadcastError,
    NumericalError,
    OutOfRangeError,
    TopologyError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataIOError",
    "FittingError",
    "IllConditionedError",
    "LoadcastError",
    "NumericalError",
    "OutOfRangeError",
    "TopologyError",
    "ValidationError",
    "__version__",
]
