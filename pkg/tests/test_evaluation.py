import json

import numpy as np
import pytest

from src.exceptions import DataError
from src.services.evaluation_service import (
    EvaluationReport,
    auc_one_vs_rest,
    classify_embeddings,
    confusion_and_accuracy,
    evaluate,
    report_from_scores,
    write_report_files,
    zero_shot_classify,
)
from tests.conftest import make_record

CLASSES = ["A", "B", "C", "D"]


def brute_force_auc(scores, labels):
    positives = [s for s, y in zip(scores, labels) if y]
    negatives = [s for s, y in zip(scores, labels) if not y]
    credit = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in positives for n in negatives)
    return credit / (len(positives) * len(negatives))


@pytest.mark.parametrize("seed", range(20))
def test_auc_matches_pairwise_count(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    scores = rng.integers(0, 5, size=n).astype(float)  # plenty of ties
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    assert auc_one_vs_rest(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_auc_ignores_monotone_rescaling(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 6, size=30).astype(float)
    labels = rng.integers(0, 2, size=30)
    labels[0], labels[1] = 0, 1
    auc = auc_one_vs_rest(scores, labels)
    assert auc_one_vs_rest(np.exp(scores), labels) == pytest.approx(auc, abs=1e-12)
    assert auc_one_vs_rest(3.0 * scores + 1.0, labels) == pytest.approx(auc, abs=1e-12)
    assert auc_one_vs_rest(-scores, labels) == pytest.approx(1.0 - auc, abs=1e-12)


def test_auc_extremes():
    assert auc_one_vs_rest([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_one_vs_rest([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc_one_vs_rest([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_auc_needs_both_classes():
    with pytest.raises(DataError):
        auc_one_vs_rest([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        auc_one_vs_rest([0.1, 0.2, 0.3], [0, 1])


def test_confusion_and_adjacent_errors():
    labels = [0, 0, 1, 2, 3, 3]
    predictions = [0, 1, 1, 0, 2, 3]
    summary = confusion_and_accuracy(predictions, labels, CLASSES)
    assert summary.confusion.tolist() == [[1, 1, 0, 0], [0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 1]]
    assert summary.overall_accuracy == pytest.approx(0.5)
    assert summary.per_class_accuracy == {"A": 0.5, "B": 1.0, "C": 0.0, "D": 0.5}
    # errors: A->B (adjacent), C->A (not), D->C (adjacent)
    assert summary.adjacent_error_fraction == pytest.approx(2 / 3)


def test_perfect_predictions_have_no_adjacent_fraction():
    summary = confusion_and_accuracy([0, 1, 2], [0, 1, 2], CLASSES)
    assert summary.adjacent_error_fraction is None
    assert summary.per_class_accuracy["D"] is None


def test_confusion_rejects_bad_labels():
    with pytest.raises(DataError):
        confusion_and_accuracy([0, 4], [0, 1], CLASSES)
    with pytest.raises(DataError):
        confusion_and_accuracy([0, 1], [0], CLASSES)


def test_report_from_scores_with_modalities():
    scores = np.array([[0.9, 0.1, 0.0, 0.0], [0.2, 0.7, 0.1, 0.0], [0.1, 0.6, 0.3, 0.0], [0.0, 0.0, 0.2, 0.8]])
    labels = [0, 1, 2, 3]
    records = [
        make_record("p1", modality="s2D"),
        make_record("p2", modality="s2D"),
        make_record("p3", modality="DBT"),
        make_record("p4", modality="DM"),
    ]
    report = report_from_scores(scores, labels, CLASSES, "unit", records, log_temperature=2.0)
    assert report.overall_accuracy == 0.75
    assert report.by_modality == {"DBT": 0.0, "DM": 1.0, "s2D": 1.0}
    assert report.per_class_auc["A"] == 1.0
    assert report.log_temperature == 2.0
    assert report.mean_auc() == pytest.approx(np.mean(list(report.per_class_auc.values())))


def test_single_class_auc_is_reported_as_none():
    scores = np.array([[0.6, 0.4, 0.0, 0.0], [0.3, 0.7, 0.0, 0.0]])
    report = report_from_scores(scores, [0, 1], CLASSES, "two-class")
    assert report.per_class_auc["C"] is None
    assert report.per_class_auc["A"] == 1.0


def test_report_shape_mismatch_raises():
    with pytest.raises(DataError):
        report_from_scores(np.zeros((3, 4)), [0, 1], CLASSES, "bad")


def test_classify_embeddings_breaks_ties_to_lowest_class():
    text = np.eye(3)[[0, 0, 1, 2]]
    image = np.array([[1.0, 0.0, 0.0]])
    result = classify_embeddings(image, text, np.log(10.0))
    assert result.labels.tolist() == [0]
    np.testing.assert_allclose(result.scores.sum(axis=1), 1.0)
    np.testing.assert_allclose(result.cosine[0], [1.0, 1.0, 0.0, 0.0])


def test_zero_shot_labels_do_not_depend_on_temperature(tiny_model, prompts):
    images = np.random.default_rng(0).uniform(size=(5, 32, 32))
    before = zero_shot_classify(tiny_model, images, prompts)
    tiny_model.params["log_temperature"].value[...] = 0.0
    after = zero_shot_classify(tiny_model, images, prompts)
    np.testing.assert_array_equal(before.labels, after.labels)
    np.testing.assert_allclose(before.cosine, after.cosine)


def test_evaluate_builds_a_report(tiny_model, prompts):
    images = np.random.default_rng(1).uniform(size=(8, 32, 32))
    labels = [0, 1, 2, 3, 0, 1, 2, 3]
    report = evaluate(tiny_model, images, labels, prompts, "random")
    assert report.n_samples == 8
    assert sum(map(sum, report.confusion)) == 8
    assert set(report.per_class_auc) == set(prompts.classes)


def test_zero_shot_needs_images(tiny_model, prompts):
    with pytest.raises(DataError):
        zero_shot_classify(tiny_model, np.zeros((0, 32, 32)), prompts)


def test_write_report_files(tmp_path):
    scores = np.eye(4)
    report = report_from_scores(scores, [0, 1, 2, 3], CLASSES, "files")
    paths = write_report_files(report, tmp_path, stem="fold-0")
    assert EvaluationReport(**json.loads(paths["json"].read_text(encoding="utf-8"))) == report
    lines = paths["csv"].read_text(encoding="utf-8").splitlines()
    assert lines[0] == "truth\\prediction,A,B,C,D"
    assert lines[1] == "A,1,0,0,0"
    assert paths["png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_records_must_match_samples():
    with pytest.raises(DataError):
        report_from_scores(np.eye(4), [0, 1, 2, 3], CLASSES, "x", [make_record("p1")])