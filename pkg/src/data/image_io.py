"""
Grayscale PNG I/O through OpenCV.

Images live in memory as float64 arrays in [0, 1]; files are 8- or 16-bit
single-channel PNG.
"""

from pathlib import Path
from typing import Union

import cv2
import numpy as np

from src.exceptions import DataError
from src.utils.io import atomic_write_bytes

PathLike = Union[str, Path]


def read_grayscale(path: PathLike) -> np.ndarray:
    """
    Read an 8- or 16-bit grayscale PNG into [0, 1].

    Raises:
        DataError: Unreadable file or unsupported bit depth
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    raw = cv2.imdecode(np.fromfile(str(path), dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"could not decode image: {path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / 65535.0
    raise DataError(f"unsupported pixel type {raw.dtype} in {path}")


def encode_grayscale(image: np.ndarray, bits: int = 16) -> bytes:
    """PNG bytes of an image in [0, 1] (values outside are clipped)."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    top = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    pixels = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * top).astype(dtype)
    ok, buffer = cv2.imencode(".png", pixels)
    if not ok:
        raise DataError("PNG encoding failed")
    return buffer.tobytes()


def write_grayscale(path: PathLike, image: np.ndarray, bits: int = 16) -> Path:
    return atomic_write_bytes(path, encode_grayscale(image, bits))


def encode_rgb(rgb: np.ndarray) -> bytes:
    """PNG bytes of an (h, w, 3) uint8 RGB array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"expected (h, w, 3) uint8 RGB, got {rgb.shape} {rgb.dtype}")
    ok, buffer = cv2.imencode(".png", cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
    if not ok:
        raise DataError("PNG encoding failed")
    return buffer.tobytes()


def write_rgb(path: PathLike, rgb: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_rgb(rgb))


def write_mask(path: PathLike, mask: np.ndarray) -> Path:
    """Binary mask as an 8-bit PNG (0 / 255)."""
    return atomic_write_bytes(path, encode_grayscale(np.asarray(mask, dtype=bool).astype(np.float64), bits=8))


def read_mask(path: PathLike) -> np.ndarray:
    return read_grayscale(path) > 0.5
