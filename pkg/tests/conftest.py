"""
Shared fixtures: tiny encoder configs, phantom factories and small manifests.
"""

import os
import sys
from datetime import date
from typing import Callable, List

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.data.manifest import ImageRecord, Manifest
from src.data.phantom import PhantomImage, PhantomSpec, generate_phantom
from src.models.dual_encoder import ConvBlockConfig, DualEncoderModel, TextEncoderConfig, VisionEncoderConfig
from src.models.objective import ClassPromptSet


@pytest.fixture
def prompts() -> ClassPromptSet:
    return ClassPromptSet.default()


@pytest.fixture
def tiny_vision() -> VisionEncoderConfig:
    return VisionEncoderConfig(
        input_size=32,
        conv_blocks=[ConvBlockConfig(channels=4), ConvBlockConfig(channels=8)],
        embed_dim=8,
    )


@pytest.fixture
def tiny_text() -> TextEncoderConfig:
    return TextEncoderConfig(token_embed_dim=6, embed_dim=8)


@pytest.fixture
def tiny_model(tiny_vision, tiny_text) -> DualEncoderModel:
    return DualEncoderModel.initialize(tiny_vision, tiny_text, seed=0)


@pytest.fixture
def make_phantom() -> Callable[..., PhantomImage]:
    def factory(density: str = "B", size: int = 64, seed: int = 0, **kwargs) -> PhantomImage:
        return generate_phantom(PhantomSpec(density=density, size=size, seed=seed, **kwargs))

    return factory


def make_record(patient: str, study: str = "s1", view: str = "CC", density: str = "A", **kwargs) -> ImageRecord:
    fields = dict(
        patient_id=patient,
        study_id=f"{patient}-{study}",
        image_path=f"images/{patient}_{study}_{view}.png",
        modality="s2D",
        density=density,
        site="site-1",
        acquired_at=date(2016, 1, 1),
    )
    fields.update(kwargs)
    return ImageRecord(**fields)


def random_manifest(seed: int, patients: int = 300, longitudinal_rate: float = 0.1) -> Manifest:
    """Patients with one class each, 1-3 views per study, some with two studies."""
    rng = np.random.default_rng(seed)
    records: List[ImageRecord] = []
    for p in range(patients):
        density = "ABCD"[int(rng.choice(4, p=[0.2, 0.3, 0.3, 0.2]))]
        studies = 2 if rng.random() < longitudinal_rate else 1
        for s in range(studies):
            for v in range(int(rng.integers(1, 4))):
                records.append(make_record(f"p{p:04d}", f"s{s}", f"v{v}", density))
    return Manifest(records, {"dataset": f"random-{seed}"})


@pytest.fixture
def small_manifest() -> Manifest:
    return random_manifest(0, patients=120)
