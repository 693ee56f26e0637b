import math

import numpy as np
import pytest

from src.autodiff.engine import backward, parameter
from src.autodiff.gradcheck import check_gradients
from src.constants import DENSITY_PROMPTS
from src.exceptions import DataError, NumericalError
from src.models.objective import ClassPromptSet, ClassWeights, build_batch_targets, weighted_contrastive_loss


def unweighted_cross_entropy(sims: np.ndarray, labels: np.ndarray) -> float:
    shifted = sims - sims.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(labels.size), labels].mean())


def test_default_prompt_set_uses_the_report_prompts(prompts):
    assert prompts.classes == ("A", "B", "C", "D")
    assert prompts.prompts == tuple(DENSITY_PROMPTS[c] for c in "ABCD")
    assert prompts.prompt_for("D") == "extremely dense breasts"


def test_prompt_set_rejects_unknown_class(prompts):
    with pytest.raises(DataError):
        prompts.index("E")


def test_uniform_row_gives_log_k():
    loss = weighted_contrastive_loss(np.zeros((1, 4)), [3], ClassWeights.uniform())
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_single_sample_weight_cancels():
    weights = ClassWeights(("A", "B"), (2.0, 1.0))
    loss = weighted_contrastive_loss(np.array([[1.0, 0.0]]), [0], weights)
    assert loss.item() == pytest.approx(0.313262, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_uniform_weights_equal_plain_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    sims = rng.normal(scale=4.0, size=(7, 4))
    labels = rng.integers(0, 4, size=7)
    loss = weighted_contrastive_loss(sims, labels, ClassWeights.uniform()).item()
    assert abs(loss - unweighted_cross_entropy(sims, labels)) <= 1e-12


@pytest.mark.parametrize("factor", [0.01, 0.5, 3.0, 1000.0])
def test_common_weight_rescaling_leaves_loss_unchanged(factor):
    rng = np.random.default_rng(4)
    sims = rng.normal(size=(9, 4))
    labels = rng.integers(0, 4, size=9)
    weights = ClassWeights(("A", "B", "C", "D"), (1.1875, 0.791667, 0.791667, 1.583333))
    base = weighted_contrastive_loss(sims, labels, weights).item()
    assert abs(weighted_contrastive_loss(sims, labels, weights.scaled(factor)).item() - base) <= 1e-12


def test_raising_true_class_similarity_lowers_the_loss():
    rng = np.random.default_rng(5)
    sims = rng.normal(size=(5, 4))
    labels = np.array([0, 1, 2, 3, 1])
    weights = ClassWeights.uniform()
    before = weighted_contrastive_loss(sims, labels, weights).item()
    sims[2, labels[2]] += 0.5
    assert weighted_contrastive_loss(sims, labels, weights).item() < before


def test_loss_is_non_negative():
    rng = np.random.default_rng(6)
    for _ in range(20):
        sims = rng.normal(scale=10.0, size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        assert weighted_contrastive_loss(sims, labels, ClassWeights.uniform()).item() >= 0.0


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 4, size=6)
    weights = ClassWeights(("A", "B", "C", "D"), (0.5, 1.0, 2.0, 1.5))
    error = check_gradients(
        lambda nodes: weighted_contrastive_loss(nodes[0], labels, weights), [rng.normal(size=(6, 4))]
    )
    assert error < 1e-4


def test_loss_backpropagates_into_similarities():
    sims = parameter(np.zeros((2, 4)))
    backward(weighted_contrastive_loss(sims, [0, 1], ClassWeights.uniform()))
    np.testing.assert_allclose(sims.grad.sum(axis=1), 0.0, atol=1e-12)
    assert sims.grad[0, 0] < 0 and sims.grad[1, 1] < 0


def test_empty_batch_and_bad_inputs_raise():
    weights = ClassWeights.uniform()
    with pytest.raises(DataError):
        weighted_contrastive_loss(np.zeros((0, 4)), [], weights)
    with pytest.raises(DataError):
        weighted_contrastive_loss(np.zeros((1, 4)), [4], weights)
    with pytest.raises(DataError):
        weighted_contrastive_loss(np.zeros((1, 3)), [0], weights)
    with pytest.raises(NumericalError):
        weighted_contrastive_loss(np.array([[np.nan, 0.0, 0.0, 0.0]]), [0], weights)


def test_batch_targets_have_one_positive_per_row(prompts):
    mask = build_batch_targets([0, 2], prompts)
    np.testing.assert_array_equal(mask, [[1, 0, 0, 0], [0, 0, 1, 0]])
    labels = np.random.default_rng(8).integers(0, 4, size=50)
    np.testing.assert_array_equal(build_batch_targets(labels, prompts).sum(axis=1), np.ones(50))


def test_class_weights_must_be_positive():
    with pytest.raises(DataError):
        ClassWeights(("A", "B"), (1.0, 0.0))


def test_class_weights_image_mean():
    weights = ClassWeights(("A", "B"), (2.0, 0.5))
    assert weights.image_mean({"A": 1, "B": 4}) == pytest.approx(0.8)


def test_prompt_set_from_mapping_keeps_order():
    custom = ClassPromptSet.from_mapping({"A": "fatty breasts", "D": "dense breasts"})
    assert custom.classes == ("A", "D")
    np.testing.assert_array_equal(custom.labels(["D", "A", "D"]), [1, 0, 1])
