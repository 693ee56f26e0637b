import json
import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.data.cache import ImageCache
from src.data.manifest import Manifest
from src.data.phantom import PhantomSpec, generate_phantom
from src.data.preprocessing import preprocess
from src.exceptions import ConfigError, DataError
from src.models.checkpoint import load_checkpoint
from src.models.dual_encoder import DualEncoderModel
from src.models.objective import ClassWeights
from src.services.curation import class_weights, stratified_group_kfold
from src.services.evaluation_service import evaluate, zero_shot_classify
from src.services.training_service import (
    EpochEntry,
    TrainConfig,
    Trainer,
    TrainLog,
    aggregate_folds,
    cross_validate,
)
from tests.conftest import make_record

PER_CLASS = 6


@pytest.fixture(scope="module")
def dataset():
    """Small phantom set at the 32-pixel model input size, one image per patient."""
    records, images = [], []
    for c, density in enumerate("ABCD"):
        for i in range(PER_CLASS):
            seed = 100 * c + i
            phantom = generate_phantom(PhantomSpec(density=density, size=64, seed=seed))
            images.append(preprocess(phantom.image, size=32).image)
            records.append(make_record(f"{density}{i}", density=density))
    manifest = Manifest(records, {"dataset": "tiny"})
    return manifest, ImageCache.from_arrays(manifest, np.stack(images))


def _split(manifest):
    val = [i for i in range(len(manifest)) if i % PER_CLASS == 0]
    train = [i for i in range(len(manifest)) if i % PER_CLASS != 0]
    return train, val


def _trainer(prompts, **overrides):
    config = TrainConfig(**{"epochs": 2, "batch_size": 6, "learning_rate": 1e-2, "seed": 3, **overrides})
    return Trainer(config, prompts, ClassWeights.uniform(prompts.classes))


def test_training_is_deterministic(dataset, prompts, tiny_vision, tiny_text):
    manifest, cache = dataset
    train, val = _split(manifest)
    first = _trainer(prompts).train_fold(DualEncoderModel.initialize(tiny_vision, tiny_text, seed=0), cache, train, val)
    second = _trainer(prompts).train_fold(
        DualEncoderModel.initialize(tiny_vision, tiny_text, seed=0), cache, train, val
    )
    assert first.log.numbers() == second.log.numbers()
    assert first.report == second.report
    for name, value in first.model.state().items():
        np.testing.assert_array_equal(value, second.model.state()[name])


def test_log_has_one_finite_entry_per_epoch(dataset, prompts, tiny_model):
    manifest, cache = dataset
    train, val = _split(manifest)
    result = _trainer(prompts, epochs=3).train_fold(tiny_model, cache, train, val, fold=2)
    assert [e.epoch for e in result.log.entries] == [0, 1, 2]
    assert all(math.isfinite(x) for row in result.log.numbers() for x in row)
    assert result.log.fold == 2
    assert result.best_epoch == result.log.best_entry.epoch
    assert result.report.n_samples == len(val)
    assert result.report.dataset == "fold-2-validation"


def test_best_snapshot_reproduces_its_validation_loss(tmp_path, dataset, prompts, tiny_model):
    manifest, cache = dataset
    train, val = _split(manifest)
    trainer = _trainer(prompts, checkpoint_dir=str(tmp_path))
    result = trainer.train_fold(tiny_model, cache, train, val, fold=0)

    assert result.checkpoint == tmp_path / "fold-0.nta"
    reloaded, metadata = load_checkpoint(result.checkpoint)
    assert metadata["epoch"] == result.best_epoch
    labels = prompts.labels(manifest.densities())
    loss, accuracy, _ = trainer.validation_metrics(reloaded, cache, val, labels)
    assert loss == result.log.best_entry.val_loss
    assert accuracy == result.report.overall_accuracy

    log = TrainLog.from_jsonl((tmp_path / "fold-0.log.jsonl").read_text(encoding="utf-8"))
    assert log.numbers() == result.log.numbers()


def test_fold_report_matches_evaluating_the_checkpoint(tmp_path, dataset, prompts, tiny_model):
    manifest, cache = dataset
    train, val = _split(manifest)
    result = _trainer(prompts, checkpoint_dir=str(tmp_path)).train_fold(tiny_model, cache, train, val, fold=0)

    reloaded, _ = load_checkpoint(result.checkpoint)
    labels = prompts.labels(manifest.densities())
    report = evaluate(
        reloaded,
        cache.batch(val),
        labels[val],
        prompts,
        "fold-0-validation",
        [manifest[i] for i in val],
    )
    assert report.per_class_auc == result.report.per_class_auc
    assert report == result.report


def test_validation_scores_are_class_probabilities(dataset, prompts, tiny_model):
    manifest, cache = dataset
    _, val = _split(manifest)
    labels = prompts.labels(manifest.densities())
    _, _, scores = _trainer(prompts).validation_metrics(tiny_model, cache, val, labels)
    assert scores.shape == (len(val), 4)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0)
    np.testing.assert_array_equal(scores, zero_shot_classify(tiny_model, cache.batch(val), prompts).scores)


def test_batch_larger_than_training_set_raises(dataset, prompts, tiny_model):
    manifest, cache = dataset
    with pytest.raises(ConfigError):
        _trainer(prompts, batch_size=50).train_fold(tiny_model, cache, [0, 1, 2], [3])


def test_empty_validation_set_raises(dataset, prompts, tiny_model):
    manifest, cache = dataset
    with pytest.raises(DataError):
        _trainer(prompts).train_fold(tiny_model, cache, list(range(12)), [])


def test_weights_must_match_prompts(prompts):
    with pytest.raises(DataError):
        Trainer(TrainConfig(), prompts, ClassWeights.uniform(("A", "B")))


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="rmsprop")


def test_train_log_order_and_best_epoch():
    log = TrainLog()
    log.append(EpochEntry(epoch=0, train_loss=1.0, val_loss=0.5, val_accuracy=0.5, seconds=1.0))
    log.append(EpochEntry(epoch=1, train_loss=0.9, val_loss=0.5, val_accuracy=0.6, seconds=2.0))
    with pytest.raises(ValueError):
        log.append(EpochEntry(epoch=1, train_loss=0.8, val_loss=0.4, val_accuracy=0.7, seconds=1.0))
    assert log.best_entry.epoch == 0
    lines = [json.loads(line) for line in log.to_jsonl().splitlines()]
    assert [line["epoch"] for line in lines] == [0, 1]
    assert log.numbers() == [(0, 1.0, 0.5, 0.5), (1, 0.9, 0.5, 0.6)]


def test_non_finite_log_entry_is_rejected():
    with pytest.raises(ValidationError):
        EpochEntry(epoch=0, train_loss=float("nan"), val_loss=0.5, val_accuracy=0.5, seconds=0.0)


def test_cross_validation_writes_an_aggregate_report(tmp_path, dataset, prompts, tiny_vision, tiny_text):
    manifest, cache = dataset
    assignment = stratified_group_kfold(manifest, k=2, seed=0)
    results, report = cross_validate(
        manifest,
        cache,
        assignment,
        prompts,
        class_weights(manifest),
        TrainConfig(epochs=1, batch_size=4, seed=1),
        lambda: DualEncoderModel.initialize(tiny_vision, tiny_text, seed=0),
        jobs=2,
        report_dir=tmp_path,
    )
    assert [r.fold for r in results] == [0, 1]
    assert report["k"] == 2
    written = json.loads((tmp_path / "cv_report.json").read_text(encoding="utf-8"))
    assert written["aggregate"]["accuracy"]["mean"] == pytest.approx(
        np.mean([r.report.overall_accuracy for r in results])
    )
    assert aggregate_folds(results) == report


def test_aggregate_needs_results():
    with pytest.raises(DataError):
        aggregate_folds([])


@pytest.fixture(scope="module")
def separable():
    """Two flat images per class whose brightness alone identifies the class."""
    rng = np.random.default_rng(7)
    records, images = [], []
    for c, density in enumerate("ABCD"):
        for i in range(2):
            images.append(np.clip(0.1 + 0.3 * c + rng.normal(0.0, 0.01, size=(32, 32)), 0.0, 1.0))
            records.append(make_record(f"{density}{i}", density=density))
    manifest = Manifest(records, {"dataset": "separable"})
    return manifest, ImageCache.from_arrays(manifest, np.stack(images))


@pytest.mark.slow
def test_loss_falls_on_a_separable_set(separable, prompts, tiny_model):
    manifest, cache = separable
    everything = list(range(len(manifest)))
    labels = prompts.labels(manifest.densities())
    trainer = _trainer(prompts, epochs=150, batch_size=len(everything), learning_rate=5e-2)
    initial, _, _ = trainer.validation_metrics(tiny_model, cache, everything, labels)

    result = trainer.train_fold(tiny_model, cache, everything, everything)
    entries = result.log.entries
    assert entries[0].val_loss < initial
    assert entries[1].train_loss < entries[0].train_loss
    assert result.log.best_entry.val_loss < 0.1 * initial


def test_zero_learning_rate_leaves_the_model_unchanged(dataset, prompts, tiny_model):
    manifest, cache = dataset
    train, val = _split(manifest)
    before = {name: value.copy() for name, value in tiny_model.state().items()}
    _trainer(prompts, learning_rate=0.0).train_fold(tiny_model, cache, train, val)
    for name, value in tiny_model.state().items():
        np.testing.assert_array_equal(value, before[name])
