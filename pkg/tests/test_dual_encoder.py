import numpy as np
import pytest
from pydantic import ValidationError

from src.autodiff.engine import backward
from src.constants import DENSITY_PROMPTS, INITIAL_LOG_TEMPERATURE, MAX_LOG_TEMPERATURE
from src.exceptions import DataError, ShapeError
from src.models.dual_encoder import (
    ConvBlockConfig,
    DualEncoderModel,
    TextEncoderConfig,
    VisionEncoderConfig,
    build_vocabulary,
    encode_image,
    encode_text,
    parameter_shapes,
    similarities_from_embeddings,
    similarity_matrix,
    tokenize,
)
from src.models.objective import ClassWeights, weighted_contrastive_loss


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("Extremely, DENSE breasts.") == ["extremely", "dense", "breasts"]


def test_default_vocabulary_covers_every_class_prompt():
    vocabulary = build_vocabulary(DENSITY_PROMPTS.values())
    for prompt in DENSITY_PROMPTS.values():
        assert set(tokenize(prompt)) <= set(vocabulary)
    assert len(vocabulary) == len(set(vocabulary))


def test_pool_strides_must_divide_the_input():
    with pytest.raises(ValidationError):
        VisionEncoderConfig(input_size=30, conv_blocks=[ConvBlockConfig(channels=4)] * 2)


def test_mismatched_embedding_dims_are_rejected(tiny_vision):
    with pytest.raises(ValueError):
        DualEncoderModel.initialize(tiny_vision, TextEncoderConfig(embed_dim=5))


def test_initialization_is_deterministic(tiny_vision, tiny_text):
    a = DualEncoderModel.initialize(tiny_vision, tiny_text, seed=3).state()
    b = DualEncoderModel.initialize(tiny_vision, tiny_text, seed=3).state()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_initial_temperature_and_parameter_shapes(tiny_model):
    assert tiny_model.log_temperature == pytest.approx(INITIAL_LOG_TEMPERATURE)
    assert tiny_model.similarity_scale == pytest.approx(10.0)
    expected = parameter_shapes(tiny_model.vision_config, tiny_model.text_config)
    assert {n: p.value.shape for n, p in tiny_model.params.items()} == expected


def test_image_embeddings_are_unit_norm(tiny_model):
    images = np.random.default_rng(0).uniform(size=(3, 32, 32))
    encoding = encode_image(tiny_model, images, keep_activations=True)
    assert encoding.embeddings.shape == (3, 8)
    np.testing.assert_allclose(np.linalg.norm(encoding.embeddings, axis=1), 1.0)
    assert encoding.saliency_activations.shape == (3, 8, 8, 8)


def test_single_image_gives_one_row(tiny_model):
    image = np.random.default_rng(1).uniform(size=(32, 32))
    assert encode_image(tiny_model, image).embeddings.shape == (1, 8)


def test_text_embedding_is_unit_norm(tiny_model):
    embedding = encode_text(tiny_model, DENSITY_PROMPTS["C"])
    assert embedding.shape == (8,)
    assert np.linalg.norm(embedding) == pytest.approx(1.0)


def test_out_of_vocabulary_prompt_raises(tiny_model):
    with pytest.raises(DataError):
        encode_text(tiny_model, "entirely unknown words")


def test_wrong_image_size_raises(tiny_model):
    with pytest.raises(ShapeError):
        encode_image(tiny_model, np.zeros((2, 16, 16)))


def test_similarity_matrix_is_bounded_and_scaled(tiny_model, prompts):
    images = np.random.default_rng(2).uniform(size=(4, 32, 32))
    sims = similarity_matrix(tiny_model, images, prompts.prompts)
    assert sims.cosine.shape == (4, 4)
    assert np.all(np.abs(sims.cosine) <= 1.0 + 1e-12)
    np.testing.assert_allclose(sims.scaled, sims.cosine * tiny_model.similarity_scale)


def test_similarity_matrix_needs_two_prompts(tiny_model, prompts):
    with pytest.raises(DataError):
        similarity_matrix(tiny_model, np.zeros((1, 32, 32)) + 0.5, prompts.prompts[:1])


def test_similarities_from_embeddings_match_the_graph(tiny_model, prompts):
    images = np.random.default_rng(3).uniform(size=(2, 32, 32))
    direct = similarity_matrix(tiny_model, images, prompts.prompts)
    image_emb = tiny_model.encode_image(images).embeddings
    text_emb = tiny_model.encode_text(list(prompts.prompts))
    cached = similarities_from_embeddings(image_emb, text_emb, tiny_model.log_temperature)
    np.testing.assert_allclose(cached.scaled, direct.scaled, atol=1e-12)


def test_clamp_temperature_bounds(tiny_model):
    tiny_model.params["log_temperature"].value = np.array(9.0)
    tiny_model.clamp_temperature()
    assert tiny_model.log_temperature == pytest.approx(MAX_LOG_TEMPERATURE)
    tiny_model.params["log_temperature"].value = np.array(-1.0)
    tiny_model.clamp_temperature()
    assert tiny_model.log_temperature == 0.0


def test_snapshot_rounds_through_float32(tiny_model):
    snapshot = tiny_model.snapshot()
    for name, node in snapshot.params.items():
        np.testing.assert_array_equal(node.value, node.value.astype(np.float32).astype(np.float64))
        assert node is not tiny_model.params[name]


def test_one_step_reaches_every_parameter(tiny_model, prompts):
    images = np.random.default_rng(4).uniform(size=(8, 32, 32))
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    loss = weighted_contrastive_loss(tiny_model.logits(images, prompts.prompts), labels, ClassWeights.uniform())
    backward(loss)
    for name, node in tiny_model.params.items():
        assert node.grad is not None, name
        assert np.isfinite(node.grad).all(), name
        assert np.any(node.grad != 0), name


def test_batch_order_permutes_the_outputs(tiny_model, prompts):
    rng = np.random.default_rng(5)
    images = rng.uniform(size=(6, 32, 32))
    order = rng.permutation(6)
    embeddings = tiny_model.encode_image(images).embeddings
    np.testing.assert_allclose(tiny_model.encode_image(images[order]).embeddings, embeddings[order], atol=1e-12)
    sims = similarity_matrix(tiny_model, images, prompts.prompts)
    permuted = similarity_matrix(tiny_model, images[order], prompts.prompts)
    np.testing.assert_allclose(permuted.scaled, sims.scaled[order], atol=1e-12)
    np.testing.assert_allclose(permuted.cosine, sims.cosine[order], atol=1e-12)
