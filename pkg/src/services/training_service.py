"""
Training service: deterministic per-fold fine-tuning of the dual encoder on
the weighted contrastive objective, and k-fold cross-validation.
"""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from src.autodiff.engine import backward, constant
from src.config import RunConfig
from src.constants import (
    CHECKPOINT_SUFFIX,
    CV_REPORT_FILENAME,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
)
from src.data.cache import ImageCache
from src.data.manifest import Manifest
from src.exceptions import ConfigError, DataError, NumericalError
from src.models.checkpoint import save_checkpoint
from src.models.dual_encoder import DualEncoderModel
from src.models.objective import ClassPromptSet, ClassWeights, weighted_contrastive_loss
from src.models.optim import build_optimizer
from src.services.curation import FoldAssignment, check_fold_indices
from src.services.evaluation_service import EvaluationReport, report_from_scores, zero_shot_classify
from src.utils.io import atomic_write_json, atomic_write_text
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


class TrainConfig(BaseModel):
    epochs: int = Field(DEFAULT_EPOCHS, gt=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, gt=0)
    learning_rate: float = Field(DEFAULT_LEARNING_RATE, ge=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    patience: Optional[int] = Field(None, gt=0)

    @classmethod
    def from_run_config(cls, config: RunConfig, checkpoint_dir: Optional[Union[str, Path]] = None) -> "TrainConfig":
        fields = {name: getattr(config, name) for name in cls.model_fields if hasattr(config, name)}
        fields["checkpoint_dir"] = str(checkpoint_dir) if checkpoint_dir is not None else None
        return cls(**fields)


class EpochEntry(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float

    @field_validator("train_loss", "val_loss", "val_accuracy")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("log entries must be finite")
        return value


class TrainLog(BaseModel):
    fold: int = 0
    entries: List[EpochEntry] = Field(default_factory=list)

    def append(self, entry: EpochEntry) -> None:
        if self.entries and entry.epoch <= self.entries[-1].epoch:
            raise ValueError(f"epoch {entry.epoch} does not follow {self.entries[-1].epoch}")
        self.entries.append(entry)

    def numbers(self) -> List[Tuple[int, float, float, float]]:
        """Every logged number except wall-clock time."""
        return [(e.epoch, e.train_loss, e.val_loss, e.val_accuracy) for e in self.entries]

    @property
    def best_entry(self) -> Optional[EpochEntry]:
        if not self.entries:
            return None
        # first epoch wins ties
        return min(self.entries, key=lambda e: (e.val_loss, e.epoch))

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"fold": self.fold, **e.model_dump()}) + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                payload = json.loads(line)
                log.fold = payload.pop("fold", log.fold)
                log.append(EpochEntry(**payload))
        return log


@dataclass
class FoldResult:
    fold: int
    model: DualEncoderModel
    log: TrainLog
    best_epoch: int
    report: EvaluationReport
    checkpoint: Optional[Path] = None


class Trainer:
    """Trains one fold: fixed prompts, class weights and config."""

    def __init__(self, config: TrainConfig, prompts: ClassPromptSet, weights: ClassWeights):
        if tuple(weights.classes) != tuple(prompts.classes):
            raise DataError(f"class weights {weights.classes} do not match prompt classes {prompts.classes}")
        self.config = config
        self.prompts = prompts
        self.weights = weights
        logger.info(
            f"Trainer initialized (optimizer={config.optimizer}, lr={config.learning_rate}, "
            f"epochs={config.epochs}, batch={config.batch_size}, seed={config.seed})"
        )

    def validation_metrics(
        self,
        model: DualEncoderModel,
        cache: ImageCache,
        indices: Sequence[int],
        labels: np.ndarray,
    ) -> Tuple[float, float, np.ndarray]:
        """
        (weighted loss, accuracy, softmax scores) over the given records.

        Scores come from zero_shot_classify, the same path the evaluate
        command takes, so fold reports and re-evaluated checkpoints agree.
        """
        indices = list(indices)
        result = zero_shot_classify(model, cache.batch(indices), self.prompts)
        fold_labels = labels[np.asarray(indices)]
        loss = weighted_contrastive_loss(constant(result.scaled), fold_labels, self.weights).item()
        accuracy = float(np.mean(result.labels == fold_labels))
        return loss, accuracy, result.scores

    def train_fold(
        self,
        model: DualEncoderModel,
        cache: ImageCache,
        train_indices: Sequence[int],
        val_indices: Sequence[int],
        fold: int = 0,
    ) -> FoldResult:
        """
        Train a model in place on one fold and keep its best validation epoch.

        Batches are drawn by a permutation seeded with (seed, epoch). The
        best epoch (lowest validation loss) is stored as a float32-rounded
        snapshot; its validation metrics are computed on that snapshot, so a
        reloaded checkpoint reproduces them exactly.

        Args:
            model: Initialized model, updated in place
            cache: Preprocessed images at the model input size
            train_indices: Manifest indices used for updates
            val_indices: Manifest indices used for model selection
            fold: Fold number (checkpoint and log names)

        Returns:
            FoldResult with the best snapshot, its TrainLog and validation report

        Raises:
            DataError: Empty training or validation set
            ConfigError: Batch size larger than the training set
            NumericalError: Non-finite loss or gradient
        """
        config = self.config
        train_indices = np.asarray(train_indices, dtype=np.int64)
        val_indices = np.asarray(val_indices, dtype=np.int64)
        if train_indices.size == 0 or val_indices.size == 0:
            raise DataError(f"fold {fold}: empty training or validation set")
        if config.batch_size > train_indices.size:
            raise ConfigError(f"batch size {config.batch_size} exceeds the {train_indices.size} training images")

        labels = self.prompts.labels(cache.manifest.densities())
        sample_weights = self.weights.as_array()
        optimizer = build_optimizer(model.parameters(), config)
        checkpoint_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

        log = TrainLog(fold=fold)
        best: Optional[Tuple[float, int, DualEncoderModel, np.ndarray]] = None
        stale_epochs = 0

        for epoch in range(config.epochs):
            started = time.perf_counter()
            order = train_indices[np.random.default_rng([config.seed, epoch]).permutation(train_indices.size)]
            weighted_sum = 0.0
            weight_total = 0.0
            for start in range(0, order.size, config.batch_size):
                batch = order[start:start + config.batch_size]
                optimizer.zero_grad()
                loss = weighted_contrastive_loss(
                    model.logits(cache.batch(batch), self.prompts.prompts), labels[batch], self.weights
                )
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"fold {fold} epoch {epoch}: loss is {value}")
                backward(loss)
                optimizer.step()
                model.clamp_temperature()
                batch_weight = float(sample_weights[labels[batch]].sum())
                weighted_sum += value * batch_weight
                weight_total += batch_weight

            snapshot = model.snapshot()
            val_loss, val_accuracy, val_scores = self.validation_metrics(snapshot, cache, val_indices, labels)
            entry = EpochEntry(
                epoch=epoch,
                train_loss=weighted_sum / weight_total,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
                seconds=time.perf_counter() - started,
            )
            log.append(entry)
            logger.info(
                f"Fold {fold} epoch {epoch}: train_loss={entry.train_loss:.4f} "
                f"val_loss={val_loss:.4f} val_acc={val_accuracy:.4f} ({entry.seconds:.1f}s)"
            )

            if best is None or val_loss < best[0]:
                best = (val_loss, epoch, snapshot, val_scores)
                stale_epochs = 0
                if checkpoint_dir is not None:
                    save_checkpoint(
                        snapshot,
                        checkpoint_dir / f"fold-{fold}{CHECKPOINT_SUFFIX}",
                        {
                            "fold": fold,
                            "epoch": epoch,
                            "seed": config.seed,
                            "val_loss": val_loss,
                            "classes": list(self.prompts.classes),
                        },
                    )
            else:
                stale_epochs += 1
                if config.patience is not None and stale_epochs >= config.patience:
                    logger.info(f"Fold {fold}: no improvement for {stale_epochs} epochs, stopping")
                    break

        if checkpoint_dir is not None:
            atomic_write_text(checkpoint_dir / f"fold-{fold}.log.jsonl", log.to_jsonl())

        _, best_epoch, best_model, best_scores = best
        records = [cache.manifest[i] for i in val_indices]
        report = report_from_scores(
            best_scores,
            labels[val_indices],
            self.prompts.classes,
            f"fold-{fold}-validation",
            records,
            best_model.log_temperature,
        )
        logger.info(f"✅ Fold {fold} finished: best epoch {best_epoch}, val accuracy {report.overall_accuracy:.4f}")
        return FoldResult(
            fold=fold,
            model=best_model,
            log=log,
            best_epoch=best_epoch,
            report=report,
            checkpoint=checkpoint_dir / f"fold-{fold}{CHECKPOINT_SUFFIX}" if checkpoint_dir else None,
        )


def train_fold(
    model: DualEncoderModel,
    manifest: Manifest,
    cache: ImageCache,
    assignment: FoldAssignment,
    fold: int,
    prompts: ClassPromptSet,
    weights: ClassWeights,
    config: TrainConfig,
) -> FoldResult:
    """Train one fold of an assignment, auditing it for patient leakage first."""
    train_indices, val_indices = assignment.fold_indices(manifest, fold)
    check_fold_indices(manifest, assignment, fold, train_indices)
    return Trainer(config, prompts, weights).train_fold(model, cache, train_indices, val_indices, fold)


def _mean_sd(values: Sequence[float]) -> Dict[str, float]:
    values = [float(v) for v in values]
    mean = math.fsum(values) / len(values)
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return {"mean": mean, "sd": sd}


def aggregate_folds(results: Sequence[FoldResult]) -> Dict[str, Any]:
    """Per-fold metrics plus mean and sample standard deviation across folds."""
    if not results:
        raise DataError("no fold results to aggregate")
    classes = results[0].report.classes
    folds = [
        {
            "fold": r.fold,
            "best_epoch": r.best_epoch,
            "val_loss": r.log.best_entry.val_loss,
            "accuracy": r.report.overall_accuracy,
            "per_class_auc": r.report.per_class_auc,
            "per_class_accuracy": r.report.per_class_accuracy,
            "adjacent_error_fraction": r.report.adjacent_error_fraction,
            "checkpoint": str(r.checkpoint) if r.checkpoint else None,
        }
        for r in results
    ]
    aggregate: Dict[str, Any] = {"accuracy": _mean_sd([r.report.overall_accuracy for r in results])}
    for cls in classes:
        aucs = [r.report.per_class_auc.get(cls) for r in results]
        if all(a is not None for a in aucs):
            aggregate[f"auc_{cls}"] = _mean_sd(aucs)
    return {"k": len(results), "folds": folds, "aggregate": aggregate}


def cross_validate(
    manifest: Manifest,
    cache: ImageCache,
    assignment: FoldAssignment,
    prompts: ClassPromptSet,
    weights: ClassWeights,
    config: TrainConfig,
    model_factory: Callable[[], DualEncoderModel],
    jobs: int = 1,
    report_dir: Optional[Union[str, Path]] = None,
) -> Tuple[List[FoldResult], Dict[str, Any]]:
    """
    Train every fold from a fresh model_factory() and aggregate the results.

    Folds are independent and may run in a thread pool; results are
    returned in fold order.

    Returns:
        (fold results, aggregate report); the report is also written as
        cv_report.json under report_dir when given
    """
    cache.preload()
    folds = sorted(assignment.folds)
    logger.info(f"Cross-validation over {len(folds)} folds ({len(manifest)} images, jobs={jobs})")

    def run(fold: int) -> FoldResult:
        return train_fold(model_factory(), manifest, cache, assignment, fold, prompts, weights, config)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, folds))
    else:
        results = [run(fold) for fold in folds]

    report = aggregate_folds(results)
    if report_dir is not None:
        atomic_write_json(Path(report_dir) / CV_REPORT_FILENAME, report)
    accuracy = report["aggregate"]["accuracy"]
    logger.info(f"✅ Cross-validation done: accuracy {accuracy['mean']:.4f} ± {accuracy['sd']:.4f}")
    return results, report
