"""
Preprocessing chain for raw grayscale mammograms:
annotation removal, foreground crop, resize and min-max normalization.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import cv2
import numpy as np

from src.constants import ANNOTATION_MAX_AREA, MIN_RAW_SIZE, PREPROCESS_SIZE, SATURATION_THRESHOLD
from src.data.image_io import read_grayscale, write_grayscale
from src.data.manifest import ImageRecord, Manifest
from src.exceptions import DensityClipError, NoForegroundError, ShapeError
from src.utils.logger import setup_logger
from src.utils.validators import InputValidator

logger = setup_logger(__name__)

# Bounding boxes within this many pixels of every border count as full-frame
FULL_FRAME_TOLERANCE = 2


@dataclass
class PreprocessedImage:
    image: np.ndarray
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    bbox: Tuple[int, int, int, int] = (0, 0, 0, 0)  # y0, x0, y1, x1 (exclusive) in raw coordinates
    removed_pixels: int = 0


def _min_max(image: np.ndarray, stage: str) -> np.ndarray:
    lo = float(image.min())
    hi = float(image.max())
    if hi - lo <= 1e-12:
        raise NoForegroundError(f"no foreground: image is flat ({stage})")
    return (image - lo) / (hi - lo)


def _largest_component(binary: np.ndarray) -> Tuple[np.ndarray, Tuple[int, int, int, int]]:
    count, labels, stats, _ = cv2.connectedComponentsWithStats(binary.astype(np.uint8), connectivity=8)
    if count < 2:
        raise NoForegroundError("no foreground found after thresholding")
    # label 0 is the background; ties resolve to the lowest label
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    x, y, w, h = (int(v) for v in stats[largest, :4])
    return labels == largest, (y, x, y + h, x + w)


def remove_annotations(
    image: np.ndarray,
    foreground: np.ndarray,
    threshold: float = SATURATION_THRESHOLD,
    max_area: float = ANNOTATION_MAX_AREA,
) -> Tuple[np.ndarray, int]:
    """
    Zero near-saturated components that do not touch the main foreground.

    Args:
        image: Image normalized to [0, 1]
        foreground: Mask of the largest foreground component
        threshold: Saturation level
        max_area: Largest component size removed, as a fraction of the image

    Returns:
        (cleaned image, number of pixels zeroed)
    """
    saturated = (image >= threshold).astype(np.uint8)
    count, labels, stats, _ = cv2.connectedComponentsWithStats(saturated, connectivity=8)
    limit = max_area * image.size
    cleaned = image.copy()
    removed = 0
    for label in range(1, count):
        component = labels == label
        if stats[label, cv2.CC_STAT_AREA] >= limit or np.any(component & foreground):
            continue
        cleaned[component] = 0.0
        removed += int(stats[label, cv2.CC_STAT_AREA])
    return cleaned, removed


def preprocess(
    image: np.ndarray,
    size: int = PREPROCESS_SIZE,
    masks: Optional[Dict[str, np.ndarray]] = None,
) -> PreprocessedImage:
    """
    Clean, crop, resize and normalize a raw grayscale image.

    Args:
        image: Raw 2-D image, at least 32x32, any intensity range
        size: Output height and width
        masks: Boolean masks in raw coordinates, cropped and resized
            alongside the image (nearest neighbour)

    Returns:
        PreprocessedImage with a size x size image spanning exactly [0, 1]

    Raises:
        ShapeError: Not 2-D or smaller than 32x32
        NumericalError: Non-finite pixels
        NoForegroundError: Flat image, nothing above the Otsu threshold, or
            a degenerate bounding box
    """
    image = InputValidator.grayscale_image(image, what="raw image")
    if min(image.shape) < MIN_RAW_SIZE:
        raise ShapeError(f"raw image must be at least {MIN_RAW_SIZE}x{MIN_RAW_SIZE}, got {image.shape}")
    masks = masks or {}
    for name, mask in masks.items():
        if np.shape(mask) != image.shape:
            raise ShapeError(f"mask {name!r} has shape {np.shape(mask)}, image has {image.shape}")

    normalized = _min_max(image, "raw")
    as_u8 = np.rint(normalized * 255).astype(np.uint8)
    _, binary = cv2.threshold(as_u8, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    foreground, bbox = _largest_component(binary > 0)

    cleaned, removed = remove_annotations(normalized, foreground)

    y0, x0, y1, x1 = bbox
    if y1 - y0 < 2 or x1 - x0 < 2:
        raise NoForegroundError(f"degenerate bounding box {bbox}")
    height, width = image.shape
    full_frame = (
        image.shape == (size, size)
        and y0 <= FULL_FRAME_TOLERANCE
        and x0 <= FULL_FRAME_TOLERANCE
        and height - y1 <= FULL_FRAME_TOLERANCE
        and width - x1 <= FULL_FRAME_TOLERANCE
    )
    if full_frame:
        bbox = (0, 0, height, width)
        y0, x0, y1, x1 = bbox
    cropped = cleaned[y0:y1, x0:x1]

    if cropped.shape != (size, size):
        cropped = cv2.resize(cropped, (size, size), interpolation=cv2.INTER_LINEAR)
    output = _min_max(cropped, "cropped")

    out_masks = {}
    for name, mask in masks.items():
        region = np.asarray(mask, dtype=np.uint8)[y0:y1, x0:x1]
        if region.shape != (size, size):
            region = cv2.resize(region, (size, size), interpolation=cv2.INTER_NEAREST)
        out_masks[name] = region.astype(bool)

    return PreprocessedImage(image=output, masks=out_masks, bbox=bbox, removed_pixels=removed)


@dataclass
class PreprocessOutcome:
    manifest: Manifest
    errors: List[Dict[str, str]]


def preprocess_manifest(
    manifest: Manifest,
    out_dir: Union[str, Path],
    size: int = PREPROCESS_SIZE,
    jobs: int = 1,
) -> PreprocessOutcome:
    """
    Preprocess every image of a manifest into out_dir, keeping relative paths.

    Failing images are skipped and reported; the returned manifest lists the
    images that were written.
    """
    out_dir = Path(out_dir)

    def work(record: ImageRecord) -> Optional[str]:
        try:
            result = preprocess(read_grayscale(manifest.resolve(record)), size)
            write_grayscale(out_dir / record.image_path, result.image)
            return None
        except (DensityClipError, OSError) as e:
            return f"{type(e).__name__}: {e}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            failures = list(pool.map(work, manifest.records))
    else:
        failures = [work(record) for record in manifest.records]

    kept = [i for i, failure in enumerate(failures) if failure is None]
    errors = [
        {"image_path": manifest.records[i].image_path, "error": failure}
        for i, failure in enumerate(failures)
        if failure is not None
    ]
    for error in errors:
        logger.warning(f"Preprocessing failed for {error['image_path']}: {error['error']}")

    result = manifest.subset(kept)
    result.root = out_dir
    result.source["preprocessed"] = {"size": size}
    logger.info(f"✅ Preprocessed {len(kept)}/{len(manifest)} images into {out_dir}")
    return PreprocessOutcome(manifest=result, errors=errors)
