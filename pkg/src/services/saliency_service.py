"""
GradCAM saliency over the vision tower's last convolutional block, targeting
the image-prompt similarity (or the class probability), plus overlays and
raw-map serialization.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from src.autodiff import ops
from src.autodiff.engine import gradients
from src.constants import DEFAULT_OVERLAY_ALPHA
from src.exceptions import DataError, ShapeError
from src.models.dual_encoder import DualEncoderModel
from src.models.objective import ClassPromptSet
from src.utils.io import atomic_write_bytes
from src.utils.logger import setup_logger
from src.utils.validators import InputValidator

logger = setup_logger(__name__)

RAW_MAP_MAGIC = "SALIENCY-F32"

GradcamTarget = Literal["similarity", "probability"]


@dataclass
class SaliencyMap:
    grid: np.ndarray  # input resolution, values in [0, 1]
    raw: np.ndarray  # saliency-layer resolution, before upsampling and normalization
    target_class: str
    score: float
    image_path: Optional[str] = None


def cam_from_activations(activations: np.ndarray, grads: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Combine saliency-layer activations and score gradients into a map.

    Args:
        activations: (C, h, w) activations
        grads: (C, h, w) gradients of the target score
        size: Output resolution

    Returns:
        (raw map of shape (h, w), map of shape (size, size) normalized by its max)
    """
    activations = np.asarray(activations, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if activations.ndim != 3 or activations.shape != grads.shape:
        raise ShapeError(f"activations {activations.shape} and gradients {grads.shape} must be matching (C, h, w)")
    channel_weights = grads.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(channel_weights, activations, axes=1), 0.0)
    grid = cv2.resize(raw, (size, size), interpolation=cv2.INTER_LINEAR)
    grid = np.maximum(grid, 0.0)
    peak = grid.max()
    grid = grid / peak if peak > 0 else np.zeros_like(grid)
    return raw, grid


def gradcam(
    model: DualEncoderModel,
    image: np.ndarray,
    target_class: str,
    prompts: ClassPromptSet,
    target: GradcamTarget = "similarity",
    image_path: Optional[str] = None,
) -> SaliencyMap:
    """
    GradCAM map for one preprocessed image.

    Args:
        model: Dual encoder
        image: (size, size) preprocessed image
        target_class: Class whose prompt defines the score
        prompts: Class prompt set
        target: "similarity" (scaled cosine to the class prompt) or
            "probability" (softmax over the class prompts)
        image_path: Source path recorded in the result

    Returns:
        SaliencyMap at input resolution

    Raises:
        DataError: Class not in the prompt set
        DegenerateInputError: Zero-norm embedding
    """
    size = model.vision_config.input_size
    image = InputValidator.grayscale_image(image, size)
    class_index = prompts.index(target_class)

    image_embeddings, saliency = model.image_graph(image)
    _, scaled = model.similarity_graph(image_embeddings, model.text_graph(list(prompts.prompts)))
    if target == "probability":
        scaled = ops.softmax(scaled)
    elif target != "similarity":
        raise ValueError(f"Unknown GradCAM target {target!r}")
    score = ops.sum(ops.pick(scaled, [class_index]))

    (grads,) = gradients(score, [saliency])
    raw, grid = cam_from_activations(saliency.value[0], grads[0], size)
    return SaliencyMap(grid=grid, raw=raw, target_class=target_class, score=score.item(), image_path=image_path)


def gradcam_batch(
    model: DualEncoderModel,
    images: Sequence[np.ndarray],
    target_classes: Sequence[str],
    prompts: ClassPromptSet,
    target: GradcamTarget = "similarity",
    jobs: int = 1,
) -> List[SaliencyMap]:
    """GradCAM for several images; one independent graph per image."""
    if len(images) != len(target_classes):
        raise DataError(f"{len(images)} images for {len(target_classes)} target classes")

    def one(i: int) -> SaliencyMap:
        return gradcam(model, images[i], target_classes[i], prompts, target)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(len(images))))
    return [one(i) for i in range(len(images))]


def overlay(
    image: np.ndarray,
    grid: np.ndarray,
    alpha: float = DEFAULT_OVERLAY_ALPHA,
    colormap: int = cv2.COLORMAP_JET,
) -> np.ndarray:
    """
    Alpha-blend a colormapped saliency grid over a grayscale image.

    Returns:
        (h, w, 3) uint8 RGB array

    Raises:
        ShapeError: Image and grid sizes differ
    """
    image = np.asarray(image, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if image.ndim != 2 or image.shape != grid.shape:
        raise ShapeError(f"image {image.shape} and saliency map {grid.shape} must have the same 2-D shape")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    heat = cv2.applyColorMap(np.rint(np.clip(grid, 0, 1) * 255).astype(np.uint8), colormap)
    heat = cv2.cvtColor(heat, cv2.COLOR_BGR2RGB).astype(np.float64)
    base = np.repeat((np.clip(image, 0, 1) * 255)[:, :, None], 3, axis=2)
    return np.rint(alpha * heat + (1.0 - alpha) * base).astype(np.uint8)


def encode_raw_map(raw: np.ndarray) -> bytes:
    """Header line "SALIENCY-F32 <h> <w>" followed by little-endian float32 values."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ShapeError(f"raw saliency map must be 2-D, got {raw.shape}")
    header = f"{RAW_MAP_MAGIC} {raw.shape[0]} {raw.shape[1]}\n".encode("ascii")
    return header + np.ascontiguousarray(raw, dtype="<f4").tobytes()


def decode_raw_map(payload: bytes) -> np.ndarray:
    end = payload.find(b"\n")
    parts = payload[:end].decode("ascii", errors="replace").split() if end > 0 else []
    if len(parts) != 3 or parts[0] != RAW_MAP_MAGIC:
        raise DataError("not a raw saliency map (bad header)")
    height, width = int(parts[1]), int(parts[2])
    body = payload[end + 1:]
    if len(body) != height * width * 4:
        raise DataError(f"raw saliency map body has {len(body)} bytes, expected {height * width * 4}")
    return np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float64)


def save_raw_map(path: Union[str, Path], raw: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_raw_map(raw))


def mass_fraction(grid: np.ndarray, mask: np.ndarray) -> float:
    """Share of total saliency inside a mask (0 for an all-zero map)."""
    grid = np.asarray(grid, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if grid.shape != mask.shape:
        raise ShapeError(f"saliency map {grid.shape} and mask {mask.shape} differ")
    total = grid.sum()
    return float(grid[mask].sum() / total) if total > 0 else 0.0


def saliency_centroid(grid: np.ndarray) -> Optional[Tuple[float, float]]:
    """Saliency-weighted (row, column) centre, None for an all-zero map."""
    grid = np.asarray(grid, dtype=np.float64)
    total = grid.sum()
    if total <= 0:
        return None
    rows, cols = np.indices(grid.shape)
    return float((rows * grid).sum() / total), float((cols * grid).sum() / total)
