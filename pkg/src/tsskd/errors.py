"""Exception types shared across the package."""


class TsskdError(Exception):
    """Base class for all package errors."""


class DimensionError(TsskdError, ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class NumericError(TsskdError, ArithmeticError):
    """Raised on non-finite values where finite ones are required."""


class GraphError(TsskdError, RuntimeError):
    """Raised on misuse of the recorded gradient graph."""


class ValidationError(TsskdError, ValueError):
    """Raised when a configuration or argument violates its contract."""
