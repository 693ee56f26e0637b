"""
Class-weighted contrastive objective over fixed class prompts.

Each image is paired with the K class prompts: the prompt of its own class
is the positive, the others are negatives. The loss is softmax
cross-entropy over the K temperature-scaled similarities (image -> text
direction), weighted per sample by its class weight and normalized by the
total weight of the batch.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from src.autodiff import ops
from src.autodiff.engine import DiffNode, constant
from src.constants import DENSITY_CLASSES, DENSITY_PROMPTS
from src.exceptions import DataError, NumericalError
from src.utils.validators import InputValidator


@dataclass(frozen=True)
class ClassPromptSet:
    classes: Tuple[str, ...]
    prompts: Tuple[str, ...]

    def __post_init__(self):
        if len(self.classes) != len(self.prompts):
            raise DataError(f"{len(self.classes)} classes but {len(self.prompts)} prompts")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate class in prompt set")
        if len(set(self.prompts)) != len(self.prompts):
            raise DataError("two classes share the same prompt")
        if len(self.classes) < 2:
            raise DataError("a prompt set needs at least two classes")

    @classmethod
    def default(cls) -> "ClassPromptSet":
        return cls(classes=tuple(DENSITY_CLASSES), prompts=tuple(DENSITY_PROMPTS[c] for c in DENSITY_CLASSES))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "ClassPromptSet":
        return cls(classes=tuple(mapping), prompts=tuple(mapping.values()))

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, density: str) -> int:
        try:
            return self.classes.index(density)
        except ValueError:
            raise DataError(f"class {density!r} is not in the prompt set {self.classes}") from None

    def prompt_for(self, density: str) -> str:
        return self.prompts[self.index(density)]

    def labels(self, densities: Sequence[str]) -> np.ndarray:
        return np.array([self.index(d) for d in densities], dtype=np.int64)


@dataclass(frozen=True)
class ClassWeights:
    """
    Positive weight per class. Weights produced by class_weights() satisfy
    sum(n_c * w_c) / N == 1 over the counts they were computed from.
    """

    classes: Tuple[str, ...]
    values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.classes) != len(self.values):
            raise DataError("class weights: classes and values differ in length")
        if any(not np.isfinite(v) or v <= 0 for v in self.values):
            raise DataError(f"class weights must be positive and finite, got {self.values}")

    @classmethod
    def uniform(cls, classes: Sequence[str] = DENSITY_CLASSES) -> "ClassWeights":
        return cls(classes=tuple(classes), values=tuple(1.0 for _ in classes))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float]) -> "ClassWeights":
        return cls(classes=tuple(mapping), values=tuple(float(v) for v in mapping.values()))

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.classes, self.values))

    def image_mean(self, counts: Mapping[str, int]) -> float:
        """Average weight per image for the given class counts."""
        total = sum(counts[c] for c in self.classes)
        return float(sum(counts[c] * w for c, w in zip(self.classes, self.values)) / total)

    def scaled(self, factor: float) -> "ClassWeights":
        return ClassWeights(self.classes, tuple(v * factor for v in self.values))


def build_batch_targets(labels: Sequence[int], prompts: ClassPromptSet) -> np.ndarray:
    """
    Positive-pair mask for a batch.

    Returns:
        Boolean array (batch, K), True where the image label matches the prompt class
    """
    labels = InputValidator.class_labels(labels, len(prompts))
    mask = np.zeros((labels.size, len(prompts)), dtype=bool)
    mask[np.arange(labels.size), labels] = True
    return mask


def weighted_contrastive_loss(
    similarities: Union[DiffNode, np.ndarray],
    labels: Sequence[int],
    weights: ClassWeights,
) -> DiffNode:
    """
    Class-weighted softmax cross-entropy over scaled image-prompt similarities.

    loss = sum_i w(y_i) * CE(softmax(row_i), y_i) / sum_i w(y_i)

    Args:
        similarities: (batch, K) temperature-scaled similarities
        labels: Class index per row
        weights: One weight per class, same order as the prompt set

    Returns:
        Scalar DiffNode, differentiable with respect to the similarities

    Raises:
        DataError: Empty batch, bad labels or weight count mismatch
        NumericalError: Non-finite similarities
    """
    node = similarities if isinstance(similarities, DiffNode) else constant(similarities)
    if node.value.ndim != 2 or node.shape[0] == 0:
        raise DataError(f"similarities must be a non-empty (batch, K) matrix, got shape {node.shape}")
    if not np.all(np.isfinite(node.value)):
        raise NumericalError("non-finite similarities")
    num_classes = node.shape[1]
    if len(weights.values) != num_classes:
        raise DataError(f"{len(weights.values)} class weights for {num_classes} prompts")
    labels = InputValidator.class_labels(labels, num_classes)
    if labels.size != node.shape[0]:
        raise DataError(f"{labels.size} labels for {node.shape[0]} rows")

    sample_weights = weights.as_array()[labels]
    log_probs = ops.pick(ops.log_softmax(node), labels)
    weighted = ops.sum(ops.mul(log_probs, constant(sample_weights)))
    return ops.scale(weighted, -1.0 / float(sample_weights.sum()))
