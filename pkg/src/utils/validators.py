"""
Input validation utilities for arrays, labels and identifiers
"""

from typing import Iterable, Sequence

import numpy as np

from src.constants import DENSITY_CLASSES
from src.exceptions import DataError, NumericalError, ShapeError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


class InputValidator:
    """Validates arrays and labels crossing module boundaries"""

    @staticmethod
    def finite_array(array: np.ndarray, what: str = "array") -> np.ndarray:
        """
        Ensure an array holds only finite values.

        Args:
            array: Array to check
            what: Name used in the error message

        Returns:
            The array as float64

        Raises:
            NumericalError: If any entry is NaN or infinite
        """
        array = np.asarray(array, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            bad = int(np.count_nonzero(~np.isfinite(array)))
            raise NumericalError(f"{what} contains {bad} non-finite values")
        return array

    @staticmethod
    def grayscale_image(image: np.ndarray, size: int = None, what: str = "image") -> np.ndarray:
        """
        Validate a single-channel image, optionally of a fixed square size.

        Args:
            image: 2-D array
            size: Required height and width, or None for any
            what: Name used in error messages

        Returns:
            The image as float64

        Raises:
            ShapeError: Wrong dimensionality or size
            NumericalError: Non-finite pixels
        """
        image = np.asarray(image)
        if image.ndim != 2:
            raise ShapeError(f"{what} must be 2-D grayscale, got shape {image.shape}")
        if size is not None and image.shape != (size, size):
            raise ShapeError(f"{what} must be {size}x{size}, got {image.shape[0]}x{image.shape[1]}")
        return InputValidator.finite_array(image, what)

    @staticmethod
    def class_labels(labels: Iterable[int], num_classes: int) -> np.ndarray:
        """
        Validate integer class indices.

        Args:
            labels: Class indices
            num_classes: Number of classes K

        Returns:
            Labels as an int64 array

        Raises:
            DataError: Empty input or index outside [0, K)
        """
        labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
        if labels.size == 0:
            raise DataError("labels are empty")
        if labels.ndim != 1:
            raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DataError(f"labels must be integers, got {labels.dtype}")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise DataError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
        return labels.astype(np.int64)

    @staticmethod
    def density_class(value: str, classes: Sequence[str] = DENSITY_CLASSES) -> str:
        if value not in classes:
            raise DataError(f"Unknown density category {value!r}; expected one of {', '.join(classes)}")
        return value
