# errors.py
"""Error taxonomy shared by every stemcast module."""


class StemcastError(Exception):
    """Base class for all errors raised by stemcast."""

    exit_code = 1


class ConfigError(StemcastError):
    """Invalid configuration or command-line usage."""

    exit_code = 1


class DataError(StemcastError):
    """Problems ingesting, splitting or windowing a time series."""

    exit_code = 2


class ShapeError(StemcastError, ValueError):
    """Operand dimensions do not agree."""

    exit_code = 3


class NumericError(StemcastError, ArithmeticError):
    """A non-finite value appeared in a computation."""

    exit_code = 3


class TapeError(StemcastError, RuntimeError):
    """Backward requested for a value that was never recorded."""

    exit_code = 3
