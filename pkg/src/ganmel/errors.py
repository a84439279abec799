"""Exception types shared across the package.

The CLI maps these onto exit codes: DataFormatError -> 3, NumericalError -> 4.
"""


class DataFormatError(ValueError):
    """Raised for corrupt or mismatched on-disk data (bad magic, truncation, ...)."""


class NumericalError(RuntimeError):
    """Raised when training or evaluation hits non-finite values."""
