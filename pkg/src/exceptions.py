"""
Error hierarchy for DensityCLIP.

Every error carries the CLI exit code it maps to.
"""

from typing import Optional

from src.constants import (
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_IO_ERROR,
    EXIT_NUMERICAL_ERROR,
)


class DensityClipError(Exception):
    exit_code: int = EXIT_DATA_ERROR


class ConfigError(DensityClipError, ValueError):
    exit_code = EXIT_CONFIG_ERROR


class DataError(DensityClipError, ValueError):
    exit_code = EXIT_DATA_ERROR


class ShapeError(DataError):
    """Array shapes do not conform to an operation."""


class ManifestError(DataError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class PhantomSpecError(DataError):
    pass


class NoForegroundError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class LeakageError(DataError):
    pass


class NumericalError(DensityClipError, ArithmeticError):
    exit_code = EXIT_NUMERICAL_ERROR


class DegenerateInputError(NumericalError):
    """Input has no direction to normalize (zero vector, flat image)."""


class GraphError(DensityClipError, RuntimeError):
    exit_code = EXIT_NUMERICAL_ERROR


class OutputExistsError(DensityClipError, FileExistsError):
    exit_code = EXIT_IO_ERROR
