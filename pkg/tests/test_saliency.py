import numpy as np
import pytest

from src.exceptions import DataError, ShapeError
from src.services.saliency_service import (
    cam_from_activations,
    decode_raw_map,
    encode_raw_map,
    gradcam,
    gradcam_batch,
    mass_fraction,
    overlay,
    saliency_centroid,
    save_raw_map,
)


def test_cam_weights_channels_by_mean_gradient():
    activations = np.zeros((2, 4, 4))
    activations[0, :2, :2] = 1.0
    activations[1, 2:, 2:] = 1.0
    grads = np.stack([np.full((4, 4), 1.0), np.full((4, 4), -1.0)])
    raw, grid = cam_from_activations(activations, grads, size=4)
    # the negatively weighted channel is clipped away
    assert raw[:2, :2].tolist() == [[1.0, 1.0], [1.0, 1.0]]
    assert np.all(raw[2:, 2:] == 0.0)
    assert grid.max() == 1.0


def test_cam_of_zero_gradients_is_all_zero():
    raw, grid = cam_from_activations(np.ones((3, 2, 2)), np.zeros((3, 2, 2)), size=8)
    assert grid.shape == (8, 8)
    assert not grid.any()


def test_cam_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        cam_from_activations(np.ones((3, 2, 2)), np.ones((3, 2, 3)), size=4)


@pytest.mark.parametrize("target", ["similarity", "probability"])
def test_gradcam_map_covers_the_input(tiny_model, prompts, make_phantom, target):
    image = make_phantom("C", size=32).image
    result = gradcam(tiny_model, image, "C", prompts, target=target, image_path="x.png")
    assert result.grid.shape == (32, 32)
    assert result.raw.shape == (8, 8)
    assert result.grid.min() >= 0.0 and result.grid.max() <= 1.0
    assert result.target_class == "C"
    assert result.image_path == "x.png"
    if target == "probability":
        assert 0.0 < result.score < 1.0


def test_gradcam_rejects_unknown_class_and_wrong_size(tiny_model, prompts):
    with pytest.raises(DataError):
        gradcam(tiny_model, np.zeros((32, 32)), "E", prompts)
    with pytest.raises(ShapeError):
        gradcam(tiny_model, np.zeros((16, 16)), "A", prompts)


def test_gradcam_batch_matches_single_calls(tiny_model, prompts):
    rng = np.random.default_rng(0)
    images = [rng.uniform(size=(32, 32)) for _ in range(3)]
    batch = gradcam_batch(tiny_model, images, ["A", "B", "D"], prompts, jobs=2)
    for image, cls, result in zip(images, ["A", "B", "D"], batch):
        np.testing.assert_array_equal(result.grid, gradcam(tiny_model, image, cls, prompts).grid)
    with pytest.raises(DataError):
        gradcam_batch(tiny_model, images, ["A"], prompts)


def test_overlay_blends_to_rgb():
    image = np.linspace(0, 1, 64).reshape(8, 8)
    grid = np.zeros((8, 8))
    rgb = overlay(image, grid, alpha=0.0)
    assert rgb.shape == (8, 8, 3) and rgb.dtype == np.uint8
    np.testing.assert_array_equal(rgb[:, :, 0], np.rint(image * 255).astype(np.uint8))
    with pytest.raises(ShapeError):
        overlay(image, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        overlay(image, grid, alpha=1.5)


def test_raw_map_file_format(tmp_path):
    raw = np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0
    payload = encode_raw_map(raw)
    assert payload.startswith(b"SALIENCY-F32 2 3\n")
    np.testing.assert_array_equal(decode_raw_map(payload), raw.astype(np.float32).astype(np.float64))
    path = save_raw_map(tmp_path / "map.f32", raw)
    assert path.read_bytes() == payload


def test_raw_map_rejects_bad_payloads():
    payload = encode_raw_map(np.ones((2, 2)))
    with pytest.raises(DataError):
        decode_raw_map(b"NOPE 2 2\n" + payload.split(b"\n", 1)[1])
    with pytest.raises(DataError):
        decode_raw_map(payload[:-1])
    with pytest.raises(ShapeError):
        encode_raw_map(np.ones(4))


def test_mass_fraction_and_centroid():
    grid = np.zeros((4, 4))
    grid[0, 0] = 3.0
    grid[3, 3] = 1.0
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2, :2] = True
    assert mass_fraction(grid, mask) == pytest.approx(0.75)
    assert saliency_centroid(grid) == pytest.approx((0.75, 0.75))
    assert saliency_centroid(np.zeros((4, 4))) is None
    assert mass_fraction(np.zeros((4, 4)), mask) == 0.0
    with pytest.raises(ShapeError):
        mass_fraction(grid, mask[:2])


@pytest.mark.parametrize("factor", [0.25, 3.0, 1e4])
def test_cam_ignores_positive_score_scaling(factor):
    rng = np.random.default_rng(6)
    activations = rng.uniform(size=(5, 4, 4))
    grads = rng.normal(size=(5, 4, 4))
    raw, grid = cam_from_activations(activations, grads, size=16)
    scaled_raw, scaled_grid = cam_from_activations(activations, factor * grads, size=16)
    np.testing.assert_allclose(scaled_grid, grid, atol=1e-12)
    np.testing.assert_allclose(scaled_raw, factor * raw, rtol=1e-12)


def test_gradcam_similarity_map_ignores_the_temperature(tiny_model, prompts, make_phantom):
    image = make_phantom("C", size=32, seed=4).image
    tiny_model.params["log_temperature"].value = np.array(0.0)
    cool = gradcam(tiny_model, image, "C", prompts)
    tiny_model.params["log_temperature"].value = np.array(3.0)
    warm = gradcam(tiny_model, image, "C", prompts)
    assert warm.score == pytest.approx(np.exp(3.0) * cool.score)
    np.testing.assert_allclose(warm.grid, cool.grid, atol=1e-9)


def test_overlay_golden_pixels():
    image = np.array([[0.0, 1.0], [0.5, 0.25]])
    grid = np.array([[0.0, 1.0], [0.0, 1.0]])
    gray = np.rint(np.repeat((image * 255)[:, :, None], 3, axis=2)).astype(np.uint8)
    np.testing.assert_array_equal(overlay(image, grid, alpha=0.0), gray)

    heat = overlay(image, grid, alpha=1.0)
    # jet runs from blue at zero saliency to red at full saliency
    assert heat[0, 0, 2] > heat[0, 0, 0] and heat[0, 0, 1] == 0
    assert heat[0, 1, 0] > heat[0, 1, 2] and heat[0, 1, 1] == 0
    np.testing.assert_array_equal(heat[0, 0], heat[1, 0])
    np.testing.assert_array_equal(heat[0, 1], heat[1, 1])

    expected = np.rint(0.25 * heat.astype(np.float64) + 0.75 * (image[:, :, None] * 255)).astype(np.uint8)
    np.testing.assert_array_equal(overlay(image, grid, alpha=0.25), expected)
