"""
Dual encoder: a small convolutional vision tower and a bag-of-tokens text
tower, each projected into a shared unit-norm embedding space.

The vision tower is a stack of conv -> relu -> max-pool blocks; the output
of the final block is the saliency layer used by GradCAM. The text tower
looks up token embeddings, mean-pools them, applies layer norm and projects.
"""

import re
import string
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from src.autodiff import ops
from src.autodiff.engine import DiffNode, constant, parameter
from src.constants import (
    DEFAULT_CONV_CHANNELS,
    DEFAULT_EMBED_DIM,
    DEFAULT_TOKEN_EMBED_DIM,
    DENSITY_PROMPTS,
    INITIAL_LOG_TEMPERATURE,
    MAX_LOG_TEMPERATURE,
    PREPROCESS_SIZE,
)
from src.exceptions import DataError, ShapeError
from src.utils.logger import setup_logger
from src.utils.validators import InputValidator

logger = setup_logger(__name__)

_PUNCTUATION = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation and split on whitespace."""
    return _PUNCTUATION.sub("", text.lower()).split()


def build_vocabulary(prompts: Iterable[str]) -> List[str]:
    """Ordered unique tokens of the given prompts, in first-seen order."""
    vocabulary: List[str] = []
    for prompt in prompts:
        for token in tokenize(prompt):
            if token not in vocabulary:
                vocabulary.append(token)
    return vocabulary


class ConvBlockConfig(BaseModel):
    channels: int = Field(gt=0)
    kernel: int = Field(3, gt=0)
    stride: int = Field(2, gt=0)  # max-pool window and stride


class VisionEncoderConfig(BaseModel):
    input_size: int = Field(PREPROCESS_SIZE, gt=0)
    conv_blocks: List[ConvBlockConfig] = Field(
        default_factory=lambda: [ConvBlockConfig(channels=c) for c in DEFAULT_CONV_CHANNELS],
        min_length=1,
    )
    embed_dim: int = Field(DEFAULT_EMBED_DIM, gt=0)

    @model_validator(mode="after")
    def _check_pooling(self) -> "VisionEncoderConfig":
        size = self.input_size
        for i, block in enumerate(self.conv_blocks):
            if size % block.stride:
                raise ValueError(f"block {i} pool stride {block.stride} does not divide feature size {size}")
            size //= block.stride
        return self

    @property
    def saliency_size(self) -> int:
        size = self.input_size
        for block in self.conv_blocks:
            size //= block.stride
        return size


class TextEncoderConfig(BaseModel):
    vocabulary: List[str] = Field(default_factory=lambda: build_vocabulary(DENSITY_PROMPTS.values()))
    token_embed_dim: int = Field(DEFAULT_TOKEN_EMBED_DIM, gt=0)
    embed_dim: int = Field(DEFAULT_EMBED_DIM, gt=0)

    @field_validator("vocabulary")
    @classmethod
    def _check_vocabulary(cls, vocabulary: List[str]) -> List[str]:
        if not vocabulary:
            raise ValueError("vocabulary is empty")
        if len(set(vocabulary)) != len(vocabulary):
            raise ValueError("vocabulary has duplicate tokens")
        for token in vocabulary:
            if tokenize(token) != [token]:
                raise ValueError(f"vocabulary token {token!r} is not a normalized word")
        return vocabulary


@dataclass
class ImageEncoding:
    embeddings: np.ndarray
    saliency_activations: Optional[np.ndarray] = None


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def parameter_shapes(vision_config: VisionEncoderConfig, text_config: TextEncoderConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every parameter, in checkpoint order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    in_channels = 1
    for i, block in enumerate(vision_config.conv_blocks):
        shapes[f"vision.block{i}.weight"] = (block.channels, in_channels, block.kernel, block.kernel)
        shapes[f"vision.block{i}.bias"] = (block.channels,)
        in_channels = block.channels
    embed = vision_config.embed_dim
    tdim = text_config.token_embed_dim
    shapes["vision.proj.weight"] = (in_channels, embed)
    shapes["vision.proj.bias"] = (embed,)
    shapes["text.token_embedding"] = (len(text_config.vocabulary), tdim)
    shapes["text.norm.gamma"] = (tdim,)
    shapes["text.norm.beta"] = (tdim,)
    shapes["text.proj.weight"] = (tdim, embed)
    shapes["text.proj.bias"] = (embed,)
    shapes["log_temperature"] = ()
    return shapes


class DualEncoderModel:
    """
    Vision and text towers with projection heads and a learnable temperature.

    Parameters are leaf DiffNodes kept in a name-ordered dict; that order is
    the checkpoint order.
    """

    def __init__(
        self,
        vision_config: VisionEncoderConfig,
        text_config: TextEncoderConfig,
        params: Dict[str, DiffNode],
    ):
        if vision_config.embed_dim != text_config.embed_dim:
            raise ValueError(
                f"vision embed_dim {vision_config.embed_dim} != text embed_dim {text_config.embed_dim}"
            )
        self.vision_config = vision_config
        self.text_config = text_config
        self.params = params
        self._token_index = {token: i for i, token in enumerate(text_config.vocabulary)}

    @classmethod
    def initialize(
        cls,
        vision_config: Optional[VisionEncoderConfig] = None,
        text_config: Optional[TextEncoderConfig] = None,
        seed: int = 0,
    ) -> "DualEncoderModel":
        """
        Create a model with Glorot-uniform weights, zero biases and
        log_temperature = ln(10).
        """
        vision_config = vision_config or VisionEncoderConfig()
        text_config = text_config or TextEncoderConfig(embed_dim=vision_config.embed_dim)
        rng = np.random.default_rng(seed)
        params: Dict[str, DiffNode] = {}

        in_channels = 1
        for i, block in enumerate(vision_config.conv_blocks):
            k = block.kernel
            shape = (block.channels, in_channels, k, k)
            params[f"vision.block{i}.weight"] = parameter(
                _glorot(rng, shape, in_channels * k * k, block.channels * k * k), f"vision.block{i}.weight"
            )
            params[f"vision.block{i}.bias"] = parameter(np.zeros(block.channels), f"vision.block{i}.bias")
            in_channels = block.channels

        embed = vision_config.embed_dim
        params["vision.proj.weight"] = parameter(
            _glorot(rng, (in_channels, embed), in_channels, embed), "vision.proj.weight"
        )
        params["vision.proj.bias"] = parameter(np.zeros(embed), "vision.proj.bias")

        vocab = len(text_config.vocabulary)
        tdim = text_config.token_embed_dim
        params["text.token_embedding"] = parameter(
            _glorot(rng, (vocab, tdim), vocab, tdim), "text.token_embedding"
        )
        params["text.norm.gamma"] = parameter(np.ones(tdim), "text.norm.gamma")
        params["text.norm.beta"] = parameter(np.zeros(tdim), "text.norm.beta")
        params["text.proj.weight"] = parameter(_glorot(rng, (tdim, embed), tdim, embed), "text.proj.weight")
        params["text.proj.bias"] = parameter(np.zeros(embed), "text.proj.bias")
        params["log_temperature"] = parameter(np.array(INITIAL_LOG_TEMPERATURE), "log_temperature")

        logger.info(
            f"DualEncoderModel initialized (input={vision_config.input_size}, "
            f"blocks={len(vision_config.conv_blocks)}, embed_dim={embed}, seed={seed})"
        )
        return cls(vision_config, text_config, params)

    # ------------------------------------------------------------ parameters

    @property
    def embed_dim(self) -> int:
        return self.vision_config.embed_dim

    @property
    def log_temperature(self) -> float:
        return self.params["log_temperature"].item()

    @property
    def similarity_scale(self) -> float:
        return float(np.exp(self.log_temperature))

    def parameters(self) -> List[DiffNode]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for node in self.params.values():
            node.grad = None

    def clamp_temperature(self) -> None:
        node = self.params["log_temperature"]
        clamped = np.clip(node.value, 0.0, MAX_LOG_TEMPERATURE)
        if not np.array_equal(clamped, node.value):
            node.value = clamped

    def state(self) -> Dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.params.items()}

    def copy(self) -> "DualEncoderModel":
        params = {name: parameter(node.value.copy(), name) for name, node in self.params.items()}
        return DualEncoderModel(self.vision_config, self.text_config, params)

    def snapshot(self) -> "DualEncoderModel":
        """Copy with every parameter rounded through float32 (checkpoint precision)."""
        params = {
            name: parameter(node.value.astype(np.float32).astype(np.float64), name)
            for name, node in self.params.items()
        }
        return DualEncoderModel(self.vision_config, self.text_config, params)

    # ------------------------------------------------------------ graph builders

    def _image_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        size = self.vision_config.input_size
        if images.ndim != 3 or images.shape[1:] != (size, size):
            raise ShapeError(f"images must have shape (n, {size}, {size}), got {images.shape}")
        if images.shape[0] == 0:
            raise DataError("empty image batch")
        InputValidator.finite_array(images, "image batch")
        return images[:, None, :, :]

    def image_graph(self, images: np.ndarray) -> Tuple[DiffNode, DiffNode]:
        """
        Build the vision-tower graph.

        Args:
            images: (n, size, size) or (size, size) array

        Returns:
            (unit-norm embeddings of shape (n, embed_dim), saliency-layer activations)
        """
        x = constant(self._image_batch(images))
        for i, block in enumerate(self.vision_config.conv_blocks):
            x = ops.conv2d(
                x,
                self.params[f"vision.block{i}.weight"],
                self.params[f"vision.block{i}.bias"],
                stride=1,
                padding=block.kernel // 2,
            )
            x = ops.relu(x)
            if block.stride > 1:
                x = ops.max_pool2d(x, block.stride)
        saliency = x
        pooled = ops.global_avg_pool(saliency)
        projected = ops.dense(pooled, self.params["vision.proj.weight"], self.params["vision.proj.bias"])
        return ops.l2_normalize(projected), saliency

    def token_ids(self, prompt: str) -> List[int]:
        tokens = tokenize(prompt)
        if not tokens:
            raise DataError(f"prompt {prompt!r} has no tokens")
        missing = [t for t in tokens if t not in self._token_index]
        if missing:
            raise DataError(f"out-of-vocabulary tokens in prompt {prompt!r}: {', '.join(missing)}")
        return [self._token_index[t] for t in tokens]

    def text_graph(self, prompts: Sequence[str]) -> DiffNode:
        """Unit-norm embeddings of shape (len(prompts), embed_dim)."""
        if not prompts:
            raise DataError("no prompts to encode")
        table = self.params["text.token_embedding"]
        rows = []
        for prompt in prompts:
            pooled = ops.mean(ops.take_rows(table, self.token_ids(prompt)), axis=0)
            rows.append(ops.reshape(pooled, (1, self.text_config.token_embed_dim)))
        x = ops.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        x = ops.layer_norm(x, self.params["text.norm.gamma"], self.params["text.norm.beta"])
        x = ops.dense(x, self.params["text.proj.weight"], self.params["text.proj.bias"])
        return ops.l2_normalize(x)

    def similarity_graph(self, image_embeddings: DiffNode, text_embeddings: DiffNode) -> Tuple[DiffNode, DiffNode]:
        """(unscaled cosine similarities, similarities scaled by exp(log_temperature))."""
        cosine = ops.matmul(image_embeddings, ops.transpose(text_embeddings))
        scaled = ops.scale(cosine, ops.exp(self.params["log_temperature"]))
        return cosine, scaled

    def logits(self, images: np.ndarray, prompts: Sequence[str]) -> DiffNode:
        image_embeddings, _ = self.image_graph(images)
        _, scaled = self.similarity_graph(image_embeddings, self.text_graph(prompts))
        return scaled

    # ------------------------------------------------------------ array API

    def encode_image(self, images: np.ndarray, keep_activations: bool = False) -> ImageEncoding:
        embeddings, saliency = self.image_graph(images)
        return ImageEncoding(
            embeddings=embeddings.value.copy(),
            saliency_activations=saliency.value.copy() if keep_activations else None,
        )

    def encode_text(self, prompts: Sequence[str]) -> np.ndarray:
        if isinstance(prompts, str):
            prompts = [prompts]
        return self.text_graph(list(prompts)).value.copy()


@dataclass
class SimilarityMatrix:
    cosine: np.ndarray
    scaled: np.ndarray


def encode_image(model: DualEncoderModel, image: np.ndarray, keep_activations: bool = False) -> ImageEncoding:
    """
    Embed one image or a batch of preprocessed images.

    Args:
        model: Dual encoder
        image: (size, size) or (n, size, size) array in [0, 1]
        keep_activations: Also return the saliency-layer activations

    Returns:
        ImageEncoding with unit-norm embeddings of shape (n, embed_dim)
    """
    return model.encode_image(image, keep_activations)


def encode_text(model: DualEncoderModel, prompt: str) -> np.ndarray:
    """Unit-norm embedding of one prompt, shape (embed_dim,)."""
    return model.encode_text([prompt])[0]


def similarity_matrix(model: DualEncoderModel, images: np.ndarray, prompts: Sequence[str]) -> SimilarityMatrix:
    """
    Cosine similarities between a batch of images and K prompts.

    Raises:
        DataError: Empty batch or fewer than two prompts
    """
    if len(prompts) < 2:
        raise DataError(f"similarity_matrix needs at least 2 prompts, got {len(prompts)}")
    images = np.asarray(images)
    if images.ndim == 3 and images.shape[0] == 0:
        raise DataError("empty image batch")
    image_embeddings, _ = model.image_graph(images)
    cosine, scaled = model.similarity_graph(image_embeddings, model.text_graph(list(prompts)))
    return SimilarityMatrix(cosine=cosine.value.copy(), scaled=scaled.value.copy())


def similarities_from_embeddings(
    image_embeddings: np.ndarray, text_embeddings: np.ndarray, log_temperature: float
) -> SimilarityMatrix:
    """Similarity matrix from precomputed unit-norm embeddings."""
    cosine = np.asarray(image_embeddings) @ np.asarray(text_embeddings).T
    return SimilarityMatrix(cosine=cosine, scaled=cosine * float(np.exp(log_temperature)))
