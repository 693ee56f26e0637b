"""
In-memory cache of preprocessed images at the model input size.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from threading import Lock
from typing import Dict, Optional, Sequence, Union

import cv2
import numpy as np

from src.data.image_io import read_grayscale
from src.data.manifest import Manifest
from src.exceptions import ShapeError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


def load_model_input(path: Union[str, Path], size: int) -> np.ndarray:
    """Read a preprocessed image and bring it to the model input size."""
    image = read_grayscale(path)
    if image.shape != (size, size):
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA)
    return np.clip(image, 0.0, 1.0)


class ImageCache:
    """
    Loads manifest images once and serves batches by record index.

    Images whose size differs from input_size are resized with area
    interpolation; values stay in [0, 1].
    """

    def __init__(self, manifest: Manifest, input_size: int, jobs: int = 1):
        self.manifest = manifest
        self.input_size = input_size
        self.jobs = max(1, jobs)
        self._images: Dict[int, np.ndarray] = {}
        self._lock = Lock()

    @classmethod
    def from_arrays(cls, manifest: Manifest, images: np.ndarray) -> "ImageCache":
        """Cache backed by images already in memory, one per manifest record."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3 or images.shape[0] != len(manifest) or images.shape[1] != images.shape[2]:
            raise ShapeError(f"expected ({len(manifest)}, s, s) images, got {images.shape}")
        cache = cls(manifest, images.shape[1])
        cache._images = {i: images[i] for i in range(len(manifest))}
        return cache

    def _load(self, index: int) -> np.ndarray:
        return load_model_input(self.manifest.resolve(self.manifest[index]), self.input_size)

    def preload(self, indices: Optional[Sequence[int]] = None) -> None:
        indices = range(len(self.manifest)) if indices is None else indices
        missing = [i for i in indices if i not in self._images]
        if not missing:
            return
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                loaded = list(pool.map(self._load, missing))
        else:
            loaded = [self._load(i) for i in missing]
        with self._lock:
            self._images.update(zip(missing, loaded))
        logger.info(f"Image cache: {len(missing)} images loaded ({len(self._images)} cached)")

    def batch(self, indices: Sequence[int]) -> np.ndarray:
        """(len(indices), input_size, input_size) array in the given order."""
        self.preload(indices)
        return np.stack([self._images[i] for i in indices])

    def __len__(self) -> int:
        return len(self.manifest)
