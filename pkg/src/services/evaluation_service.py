"""
Evaluation service: zero-shot prompt classification and the metric suite
(one-vs-rest AUC, per-class accuracy, confusion matrix, adjacent errors).
"""

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import softmax
from scipy.stats import rankdata

from src.data.manifest import ImageRecord
from src.exceptions import DataError
from src.models.dual_encoder import DualEncoderModel, similarities_from_embeddings
from src.models.objective import ClassPromptSet
from src.utils.io import atomic_write_bytes, atomic_write_json, atomic_write_text
from src.utils.logger import setup_logger
from src.utils.validators import InputValidator

logger = setup_logger(__name__)

DEFAULT_EVAL_BATCH = 64


@dataclass
class ZeroShotResult:
    scores: np.ndarray  # (n, K) softmax over classes
    labels: np.ndarray  # (n,) argmax class index
    cosine: np.ndarray  # (n, K) unscaled similarities
    scaled: np.ndarray  # (n, K) temperature-scaled similarities


def classify_embeddings(
    image_embeddings: np.ndarray,
    text_embeddings: np.ndarray,
    log_temperature: float,
) -> ZeroShotResult:
    """Zero-shot scores from precomputed unit-norm embeddings."""
    image_embeddings = np.atleast_2d(np.asarray(image_embeddings, dtype=np.float64))
    if image_embeddings.shape[0] == 0:
        raise DataError("zero-shot classification needs at least one image")
    sims = similarities_from_embeddings(image_embeddings, text_embeddings, log_temperature)
    scores = softmax(sims.scaled, axis=1)
    # np.argmax returns the first maximum: ties go to the lowest class index
    return ZeroShotResult(
        scores=scores, labels=np.argmax(sims.scaled, axis=1), cosine=sims.cosine, scaled=sims.scaled
    )


def embed_images(model: DualEncoderModel, images: np.ndarray, batch_size: int = DEFAULT_EVAL_BATCH) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[0] == 0:
        raise DataError("no images to embed")
    chunks = [
        model.encode_image(images[start:start + batch_size]).embeddings
        for start in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def zero_shot_classify(
    model: DualEncoderModel,
    images: np.ndarray,
    prompts: ClassPromptSet,
    batch_size: int = DEFAULT_EVAL_BATCH,
) -> ZeroShotResult:
    """
    Label images by their most similar class prompt.

    Args:
        model: Dual encoder
        images: (n, size, size) preprocessed images
        prompts: Class prompts, in class-index order
        batch_size: Images per forward pass

    Returns:
        ZeroShotResult with softmax scores over the temperature-scaled
        similarities and argmax labels (ties to the lowest class index)

    Raises:
        DataError: Empty input
    """
    text_embeddings = model.encode_text(list(prompts.prompts))
    return classify_embeddings(embed_images(model, images, batch_size), text_embeddings, model.log_temperature)


def auc_one_vs_rest(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    ROC AUC from the Mann-Whitney rank statistic, ties credited one half.

    Args:
        scores: Score per sample for the positive class
        labels: 1 for positive, 0 for negative

    Returns:
        U / (n_pos * n_neg)

    Raises:
        DataError: Length mismatch, or only one class present
    """
    scores = InputValidator.finite_array(np.asarray(scores, dtype=np.float64).ravel(), "scores")
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


@dataclass
class ConfusionSummary:
    confusion: np.ndarray  # rows = truth, columns = prediction
    per_class_accuracy: Dict[str, Optional[float]]
    overall_accuracy: float
    adjacent_error_fraction: Optional[float]


def confusion_and_accuracy(
    predictions: Sequence[int],
    labels: Sequence[int],
    classes: Sequence[str],
) -> ConfusionSummary:
    """
    Confusion matrix, per-class recall, overall accuracy and the share of
    errors between neighbouring classes.

    Classes with no true samples get accuracy None; with no errors the
    adjacent-error fraction is None.

    Raises:
        DataError: Empty input, length mismatch or labels outside the classes
    """
    num_classes = len(classes)
    predictions = InputValidator.class_labels(predictions, num_classes)
    labels = InputValidator.class_labels(labels, num_classes)
    if predictions.size != labels.size:
        raise DataError(f"{predictions.size} predictions for {labels.size} labels")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    row_sums = confusion.sum(axis=1)
    per_class = {
        cls: (float(confusion[i, i] / row_sums[i]) if row_sums[i] else None) for i, cls in enumerate(classes)
    }
    errors = predictions != labels
    n_errors = int(errors.sum())
    adjacent = None
    if n_errors:
        adjacent = float(np.count_nonzero(np.abs(predictions[errors] - labels[errors]) == 1) / n_errors)
    return ConfusionSummary(
        confusion=confusion,
        per_class_accuracy=per_class,
        overall_accuracy=float(np.trace(confusion) / labels.size),
        adjacent_error_fraction=adjacent,
    )


class EvaluationReport(BaseModel):
    dataset: str
    classes: List[str]
    n_samples: int
    per_class_auc: Dict[str, Optional[float]]
    per_class_accuracy: Dict[str, Optional[float]]
    overall_accuracy: float
    confusion: List[List[int]]
    adjacent_error_fraction: Optional[float] = Field(None, ge=0.0, le=1.0)
    by_modality: Dict[str, float] = Field(default_factory=dict)
    log_temperature: Optional[float] = None

    def mean_auc(self) -> Optional[float]:
        values = [v for v in self.per_class_auc.values() if v is not None]
        return float(np.mean(values)) if values else None


def report_from_scores(
    scores: np.ndarray,
    labels: Sequence[int],
    classes: Sequence[str],
    dataset: str,
    records: Optional[Sequence[ImageRecord]] = None,
    log_temperature: Optional[float] = None,
) -> EvaluationReport:
    """
    Build an EvaluationReport from per-class scores and true labels.

    Args:
        scores: (n, K) class scores
        labels: True class index per sample
        classes: Class names in index order
        dataset: Identifier stored in the report
        records: Manifest records of the samples, for the per-modality breakdown
        log_temperature: Model temperature, stored for provenance
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = InputValidator.class_labels(labels, len(classes))
    if scores.shape != (labels.size, len(classes)):
        raise DataError(f"scores shape {scores.shape} does not match {labels.size} samples x {len(classes)} classes")
    predictions = np.argmax(scores, axis=1)
    summary = confusion_and_accuracy(predictions, labels, classes)

    per_class_auc: Dict[str, Optional[float]] = {}
    for c, cls in enumerate(classes):
        positives = labels == c
        if positives.all() or not positives.any():
            logger.warning(f"AUC for class {cls} is undefined on {dataset} (single-class labels)")
            per_class_auc[cls] = None
        else:
            per_class_auc[cls] = auc_one_vs_rest(scores[:, c], positives)

    by_modality: Dict[str, float] = {}
    if records is not None:
        if len(records) != labels.size:
            raise DataError(f"{len(records)} records for {labels.size} samples")
        modalities = np.array([r.modality for r in records])
        for modality in sorted(set(modalities)):
            mask = modalities == modality
            by_modality[modality] = float(np.mean(predictions[mask] == labels[mask]))

    return EvaluationReport(
        dataset=dataset,
        classes=list(classes),
        n_samples=int(labels.size),
        per_class_auc=per_class_auc,
        per_class_accuracy=summary.per_class_accuracy,
        overall_accuracy=summary.overall_accuracy,
        confusion=summary.confusion.tolist(),
        adjacent_error_fraction=summary.adjacent_error_fraction,
        by_modality=by_modality,
        log_temperature=log_temperature,
    )


def evaluate(
    model: DualEncoderModel,
    images: np.ndarray,
    labels: Sequence[int],
    prompts: ClassPromptSet,
    dataset: str,
    records: Optional[Sequence[ImageRecord]] = None,
) -> EvaluationReport:
    """Zero-shot classify images and score the predictions."""
    result = zero_shot_classify(model, images, prompts)
    report = report_from_scores(result.scores, labels, prompts.classes, dataset, records, model.log_temperature)
    logger.info(
        f"Evaluated {report.n_samples} images on {dataset}: accuracy={report.overall_accuracy:.4f}, "
        f"mean AUC={report.mean_auc()}"
    )
    return report


# ------------------------------------------------------------ report files


def confusion_csv(report: EvaluationReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["truth\\prediction"] + report.classes)
    for cls, row in zip(report.classes, report.confusion):
        writer.writerow([cls] + row)
    return buffer.getvalue()


def confusion_png(report: EvaluationReport) -> bytes:
    """Confusion matrix heatmap rendered with matplotlib (Agg)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matrix = np.array(report.confusion, dtype=np.float64)
    figure, axis = plt.subplots(figsize=(4, 4), dpi=100)
    axis.imshow(matrix, cmap="Blues")
    axis.set_xticks(range(len(report.classes)), report.classes)
    axis.set_yticks(range(len(report.classes)), report.classes)
    axis.set_xlabel("Predicted")
    axis.set_ylabel("True")
    axis.set_title(report.dataset)
    top = matrix.max() if matrix.size else 0
    for (i, j), value in np.ndenumerate(matrix):
        axis.text(j, i, int(value), ha="center", va="center", color="white" if value > top / 2 else "black")
    figure.tight_layout()
    buffer = io.BytesIO()
    figure.savefig(buffer, format="png", metadata={"Software": None})
    plt.close(figure)
    return buffer.getvalue()


def write_report_files(
    report: EvaluationReport,
    out_dir: Union[str, Path],
    stem: str = "evaluation",
    figure: bool = True,
) -> Dict[str, Path]:
    """
    Write <stem>.json, <stem>_confusion.csv and optionally <stem>_confusion.png.

    Returns:
        Mapping of artifact kind to path
    """
    out_dir = Path(out_dir)
    paths = {
        "json": atomic_write_json(out_dir / f"{stem}.json", report.model_dump()),
        "csv": atomic_write_text(out_dir / f"{stem}_confusion.csv", confusion_csv(report)),
    }
    if figure:
        paths["png"] = atomic_write_bytes(out_dir / f"{stem}_confusion.png", confusion_png(report))
    logger.info(f"Evaluation report written: {paths['json']}")
    return paths
