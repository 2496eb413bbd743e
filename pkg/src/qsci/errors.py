"""Common exception types with CLI exit-code mapping."""


class QsciError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ShapeError(QsciError, ValueError):
    """Tensor shapes incompatible for the requested operation."""

    exit_code = 2


class ConfigError(QsciError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(QsciError, ValueError):
    """Missing or malformed data files."""

    exit_code = 3


class NumericError(QsciError, ArithmeticError):
    """Non-finite value produced where finite values are required."""

    exit_code = 4


class FormatError(QsciError, ValueError):
    """Corrupt or mismatched binary container."""

    exit_code = 3
