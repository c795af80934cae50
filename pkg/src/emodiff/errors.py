"""Exception types shared across the toolkit."""


class DimensionMismatchError(ValueError):
    """Raised when tensor shapes disagree along a named axis."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""


class DataError(ValueError):
    """Raised for malformed or missing input data."""
