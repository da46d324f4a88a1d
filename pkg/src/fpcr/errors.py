"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class FpcrError(Exception):
    """Base class for all package errors."""


class ShapeError(FpcrError):
    """Tensor or image extents do not conform to an operation's contract."""


class TapeError(FpcrError):
    """Gradient tape misuse (backward on a consumed tape, non-scalar loss, ...)."""


class ConfigError(FpcrError):
    """Invalid or unknown configuration value."""


class DataError(FpcrError):
    """Malformed input file or missing scene data."""


class NumericError(FpcrError):
    """Non-finite value where a finite one is required (divergent loss, ...)."""
