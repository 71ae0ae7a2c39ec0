"""Exception types shared across the package."""


class DialRankError(Exception):
    """Base class for all package errors."""


class ShapeError(DialRankError, ValueError):
    pass


class DataError(DialRankError):
    """Malformed or inconsistent input file / dataset."""


class ConfigError(DialRankError):
    pass


class NumericError(DialRankError):
    """Non-finite loss or values during training."""
