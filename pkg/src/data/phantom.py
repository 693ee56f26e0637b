"""
Synthetic density phantoms.

A phantom is a half-ellipse "breast" against the left image border on a dark
background. Fibroglandular tissue is a smooth random field thresholded so
that exactly the requested fraction of the foreground is dense; the mask of
those pixels is returned as ground truth. Artifacts (burned-in text, paddle
edge, implant, clip) are rendered on request and tracked in their own mask.
"""

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import gaussian_filter

from src.constants import (
    DENSITY_CLASSES,
    DENSITY_RANGES,
    MIN_RAW_SIZE,
    MODALITY_CONTRAST,
    MODALITY_MIX,
    OVERLAPPING_DENSITY_RANGES,
    SITE_MIX,
    VIEWS,
)
from src.data.image_io import write_grayscale, write_mask
from src.data.manifest import Density, ImageRecord, Manifest, Modality
from src.exceptions import ConfigError, DensityClipError, PhantomSpecError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

BACKGROUND_NOISE = 0.01
BREAST_HEIGHT = 0.42
BREAST_WIDTH = 0.75
FAT_LEVEL = 0.50
FAT_FALLOFF = 0.05
DENSE_CONTRAST = 0.27
IMPLANT_LEVEL = 0.92
ARTIFACT_LEVEL = 1.0
PADDLE_GAIN = 0.12
LONGITUDINAL_RATE = 0.10
BASE_DATE = date(2015, 1, 1)


class ArtifactFlags(BaseModel):
    model_config = ConfigDict(frozen=True)

    burned_in_text: bool = False
    paddle_mark: bool = False
    implant: bool = False
    clip: bool = False

    def any(self) -> bool:
        return self.burned_in_text or self.paddle_mark or self.implant or self.clip


class PhantomProfile(BaseModel):
    """Acquisition profile: density ranges, intensity response and artifact rates."""

    model_config = ConfigDict(frozen=True)

    name: str = "standard"
    density_ranges: Dict[str, Tuple[float, float]] = Field(default_factory=lambda: dict(DENSITY_RANGES))
    allow_overlap: bool = False
    gain: float = Field(1.0, gt=0)
    gamma: float = Field(1.0, gt=0)
    noise: float = Field(0.02, ge=0)
    artifact_rates: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_ranges(self) -> "PhantomProfile":
        previous: Optional[Tuple[float, float]] = None
        for cls in DENSITY_CLASSES:
            if cls not in self.density_ranges:
                raise ValueError(f"density range for class {cls} is missing")
            lo, hi = self.density_ranges[cls]
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"density range for class {cls} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
            if previous is not None:
                if lo <= previous[0] or hi <= previous[1]:
                    raise ValueError(f"density ranges must increase from A to D (class {cls})")
                if not self.allow_overlap and lo <= previous[1]:
                    raise ValueError(f"density range for class {cls} overlaps the previous class")
            previous = (lo, hi)
        for name, rate in self.artifact_rates.items():
            if name not in ArtifactFlags.model_fields:
                raise ValueError(f"unknown artifact {name!r}")
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"artifact rate for {name} must lie in [0, 1]")
        return self

    def draw_artifacts(self, rng: np.random.Generator) -> ArtifactFlags:
        flags = {}
        for name in ArtifactFlags.model_fields:
            draw = rng.random()
            flags[name] = bool(draw < self.artifact_rates.get(name, 0.0))
        return ArtifactFlags(**flags)


PROFILES: Dict[str, PhantomProfile] = {
    "standard": PhantomProfile(),
    "shifted": PhantomProfile(
        name="shifted",
        gain=0.9,
        gamma=1.25,
        noise=0.025,
        artifact_rates={"burned_in_text": 0.6, "paddle_mark": 0.5, "clip": 0.3, "implant": 0.1},
    ),
    "overlapping": PhantomProfile(
        name="overlapping",
        density_ranges=dict(OVERLAPPING_DENSITY_RANGES),
        allow_overlap=True,
    ),
}


def get_profile(name: str) -> PhantomProfile:
    if name not in PROFILES:
        raise PhantomSpecError(f"Unknown phantom profile {name!r}; expected one of {', '.join(PROFILES)}")
    return PROFILES[name]


class PhantomSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    density: Density
    size: int = Field(256, ge=MIN_RAW_SIZE)
    density_fraction: Optional[float] = None
    artifacts: ArtifactFlags = Field(default_factory=ArtifactFlags)
    seed: int = 0
    quadrant: Optional[int] = Field(None, ge=0, le=3)
    profile: PhantomProfile = Field(default_factory=PhantomProfile)
    modality: Modality = "s2D"
    site: str = "site-1"
    view: str = "CC"
    patient_id: str = "phantom"
    study_id: str = "study-1"
    acquired_at: date = BASE_DATE
    image_path: Optional[str] = None

    @property
    def density_range(self) -> Tuple[float, float]:
        return tuple(self.profile.density_ranges[self.density])

    def record(self) -> ImageRecord:
        path = self.image_path or f"{self.patient_id}_{self.study_id}_{self.view}.png"
        return ImageRecord(
            patient_id=self.patient_id,
            study_id=self.study_id,
            image_path=path,
            modality=self.modality,
            density=self.density,
            site=self.site,
            acquired_at=self.acquired_at,
        )


@dataclass
class PhantomImage:
    image: np.ndarray
    dense_mask: np.ndarray
    foreground_mask: np.ndarray
    artifact_mask: np.ndarray
    record: ImageRecord
    density_fraction: float

    @property
    def measured_fraction(self) -> float:
        return float(self.dense_mask.sum() / self.foreground_mask.sum())


def _quadrant_mask(yy: np.ndarray, xx: np.ndarray, cy: float, rx: float, quadrant: int) -> np.ndarray:
    """Quadrant 0/1 upper, 2/3 lower; even chest-wall side, odd nipple side."""
    rows = yy < cy if quadrant < 2 else yy >= cy
    cols = xx < rx / 2 if quadrant % 2 == 0 else xx >= rx / 2
    return rows & cols


def quadrant_capacity(size: int, quadrant: int) -> float:
    """Share of a nominal phantom's foreground that lies inside a quadrant."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, ry, rx = size / 2, size * BREAST_HEIGHT, size * BREAST_WIDTH
    foreground = ((yy - cy) / ry) ** 2 + (xx / rx) ** 2 <= 1.0
    inside = foreground & _quadrant_mask(yy, xx, cy, rx, quadrant)
    return float(inside.sum() / foreground.sum())


def _select_dense(field: np.ndarray, allowed: np.ndarray, count: int) -> np.ndarray:
    dense = np.zeros(field.shape, dtype=bool)
    if count == 0:
        return dense
    candidates = np.flatnonzero(allowed)
    order = np.argsort(-field.ravel()[candidates], kind="stable")
    dense.ravel()[candidates[order[:count]]] = True
    return dense


def _draw_text(canvas: np.ndarray, text: str, size: int) -> np.ndarray:
    scale = max(size / 400.0, 0.3)
    thickness = max(1, size // 200)
    origin = (int(0.65 * size), int(0.10 * size))
    layer = np.zeros(canvas.shape, dtype=np.uint8)
    cv2.putText(layer, text, origin, cv2.FONT_HERSHEY_SIMPLEX, scale, 255, thickness, cv2.LINE_8)
    return layer > 0


def generate_phantom(spec: PhantomSpec) -> PhantomImage:
    """
    Render one phantom.

    Args:
        spec: Class, size, artifacts and seed

    Returns:
        PhantomImage with the image in [0, 1], the dense-tissue mask, the
        foreground mask, the artifact mask and the ImageRecord

    Raises:
        PhantomSpecError: Density fraction outside the class range, or more
            dense tissue than the confining quadrant can hold
    """
    lo, hi = spec.density_range
    if spec.density_fraction is not None and not lo <= spec.density_fraction <= hi:
        raise PhantomSpecError(
            f"density fraction {spec.density_fraction} is outside the class {spec.density} range [{lo}, {hi}]"
        )

    size = spec.size
    rng = np.random.default_rng(spec.seed)
    draw = None if spec.density_fraction is not None else float(rng.random())

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    ry = size * BREAST_HEIGHT * rng.uniform(0.95, 1.05)
    rx = size * BREAST_WIDTH * rng.uniform(0.95, 1.05)
    r2 = ((yy - cy) / ry) ** 2 + (xx / rx) ** 2
    foreground = r2 <= 1.0

    artifacts = np.zeros((size, size), dtype=bool)
    implant = np.zeros((size, size), dtype=bool)
    if spec.artifacts.implant:
        icy = cy + rng.uniform(-0.05, 0.05) * size
        implant = (((yy - icy) / (0.18 * size)) ** 2 + ((xx - 0.12 * size) / (0.12 * size)) ** 2) <= 1.0
        implant &= foreground

    allowed = foreground & ~implant
    if spec.quadrant is not None:
        allowed &= _quadrant_mask(yy, xx, cy, rx, spec.quadrant)
    if draw is None:
        fraction = spec.density_fraction
    else:
        # drawn fractions stay within what the allowed region can hold
        top = min(hi, float(allowed.sum() / foreground.sum()))
        if top < lo:
            raise PhantomSpecError(
                f"class {spec.density} needs a density fraction of at least {lo} but only {top:.3f} "
                f"of the breast is available (quadrant={spec.quadrant})"
            )
        fraction = lo + (top - lo) * draw
    count = int(round(fraction * foreground.sum()))
    if count > allowed.sum():
        raise PhantomSpecError(
            f"density fraction {fraction:.3f} needs {count} dense pixels but only {int(allowed.sum())} are available"
        )
    blob_field = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16.0)
    dense = _select_dense(blob_field, allowed, count)

    contrast = MODALITY_CONTRAST[spec.modality]
    noise = rng.standard_normal((size, size))
    tissue = FAT_LEVEL + FAT_FALLOFF * np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    tissue = tissue + DENSE_CONTRAST * contrast * dense + spec.profile.noise * noise
    image = np.where(foreground, tissue, BACKGROUND_NOISE * np.abs(noise))
    image = spec.profile.gain * np.clip(image, 0.0, 1.0) ** spec.profile.gamma

    if spec.artifacts.implant:
        image[implant] = IMPLANT_LEVEL
        artifacts |= implant
    if spec.artifacts.paddle_mark:
        row = int(rng.uniform(0.15, 0.30) * size)
        band = np.zeros((size, size), dtype=bool)
        band[row:row + max(1, size // 64), :] = True
        image[band] += PADDLE_GAIN
        artifacts |= band
    if spec.artifacts.clip:
        side = max(2, size // 40)
        inside = np.argwhere(foreground & ~implant)
        y0, x0 = inside[rng.integers(len(inside))]
        clip = np.zeros((size, size), dtype=bool)
        clip[y0:y0 + side, x0:x0 + side] = True
        image[clip] = ARTIFACT_LEVEL
        artifacts |= clip
    if spec.artifacts.burned_in_text:
        text = _draw_text(image, f"{'L' if spec.seed % 2 else 'R'} {spec.view}", size)
        image[text] = ARTIFACT_LEVEL
        artifacts |= text

    image = np.clip(image, 0.0, 1.0)
    return PhantomImage(
        image=image,
        dense_mask=dense & ~artifacts,
        foreground_mask=foreground,
        artifact_mask=artifacts,
        record=spec.record(),
        density_fraction=fraction,
    )


# ------------------------------------------------------------ datasets


def _short_id(prefix: str, *parts) -> str:
    digest = hashlib.sha1(":".join(str(p) for p in parts).encode("utf-8")).hexdigest()[:10]
    return f"{prefix}-{digest}"


def _choice(rng: np.random.Generator, mix: Dict[str, float]) -> str:
    names = list(mix)
    weights = np.array([mix[n] for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=weights / weights.sum()))]


def _image_seed(seed: int, class_index: int, image_index: int) -> int:
    return int(np.random.SeedSequence([seed, class_index, image_index]).generate_state(1)[0])


def plan_dataset(
    classes: Sequence[str],
    per_class: int,
    seed: int,
    size: int = 256,
    profile: Optional[PhantomProfile] = None,
    quadrant: Optional[int] = None,
    longitudinal_rate: float = LONGITUDINAL_RATE,
) -> List[PhantomSpec]:
    """
    Lay out patients, studies and views for a phantom dataset.

    Each study holds a CC and an MLO view; a share of patients get a second,
    later study. Modality is drawn per study and site per patient.

    Args:
        classes: Density classes to generate
        per_class: Images per class
        seed: Dataset seed
        size: Raw image size
        profile: Acquisition profile (standard when None)
        quadrant: Confine dense tissue to one quadrant
        longitudinal_rate: Share of patients with a second study

    Returns:
        One PhantomSpec per image
    """
    if per_class < 1:
        raise PhantomSpecError(f"per_class must be >= 1, got {per_class}")
    profile = profile or PROFILES["standard"]
    specs: List[PhantomSpec] = []
    for class_index, density in enumerate(classes):
        if density not in DENSITY_CLASSES:
            raise PhantomSpecError(f"Unknown density class {density!r}")
        rng = np.random.default_rng([seed, class_index])
        made = 0
        patient = 0
        while made < per_class:
            patient_id = _short_id("p", seed, density, patient)
            site = _choice(rng, SITE_MIX)
            studies = 2 if rng.random() < longitudinal_rate else 1
            acquired = BASE_DATE + timedelta(days=int(rng.integers(0, 3 * 365)))
            for study in range(studies):
                study_id = _short_id("s", seed, density, patient, study)
                modality = _choice(rng, MODALITY_MIX)
                for view in VIEWS:
                    if made >= per_class:
                        break
                    image_seed = _image_seed(seed, class_index, made)
                    specs.append(
                        PhantomSpec(
                            density=density,
                            size=size,
                            artifacts=profile.draw_artifacts(rng),
                            seed=image_seed,
                            quadrant=quadrant,
                            profile=profile,
                            modality=modality,
                            site=site,
                            view=view,
                            patient_id=patient_id,
                            study_id=study_id,
                            acquired_at=acquired,
                            image_path=f"images/{density}/{patient_id}_{study_id}_{view}.png",
                        )
                    )
                    made += 1
                acquired = acquired + timedelta(days=int(rng.integers(365, 2 * 365)))
            patient += 1
    return specs


@dataclass
class GenerationOutcome:
    manifest: Manifest
    errors: List[Dict[str, str]]


def _mask_path(image_path: str, kind: str) -> str:
    path = Path(image_path)
    if path.parts and path.parts[0] == "images":
        return (Path("masks") / kind / path.relative_to("images")).as_posix()
    return path.with_suffix(f".{kind}.png").as_posix()


def generate_dataset(
    out_dir: Union[str, Path],
    classes: Sequence[str] = DENSITY_CLASSES,
    per_class: int = 250,
    seed: int = 7,
    size: int = 256,
    profile: Union[str, PhantomProfile] = "standard",
    quadrant: Optional[int] = None,
    write_masks: bool = True,
    jobs: int = 1,
) -> GenerationOutcome:
    """
    Render a phantom dataset to PNG files and return its manifest.

    Images go to out_dir/images/<class>/, ground-truth masks (dense and
    artifact) to out_dir/masks/<kind>/<class>/. The manifest is not written;
    callers decide where it lives. Phantoms that fail to render are skipped
    and reported.

    Raises:
        ConfigError: A requested class needs more dense tissue than the
            confining quadrant holds
    """
    out_dir = Path(out_dir)
    profile = get_profile(profile) if isinstance(profile, str) else profile
    specs = plan_dataset(classes, per_class, seed, size, profile, quadrant)
    if quadrant is not None:
        capacity = quadrant_capacity(size, quadrant)
        too_dense = [c for c in classes if profile.density_ranges[c][0] > capacity]
        if too_dense:
            raise ConfigError(
                f"classes {', '.join(too_dense)} need more dense tissue than quadrant {quadrant} holds "
                f"({capacity:.3f} of the breast); generate them without --quadrant"
            )
    logger.info(
        f"Generating {len(specs)} phantoms ({len(classes)} classes x {per_class}, "
        f"profile={profile.name}, size={size}, seed={seed}, jobs={jobs})"
    )

    def render(spec: PhantomSpec) -> Optional[str]:
        try:
            phantom = generate_phantom(spec)
            write_grayscale(out_dir / phantom.record.image_path, phantom.image)
            if write_masks:
                write_mask(out_dir / _mask_path(phantom.record.image_path, "dense"), phantom.dense_mask)
                write_mask(out_dir / _mask_path(phantom.record.image_path, "artifact"), phantom.artifact_mask)
            return None
        except (DensityClipError, OSError) as e:
            return f"{type(e).__name__}: {e}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            failures = list(pool.map(render, specs))
    else:
        failures = [render(spec) for spec in specs]

    records = [spec.record() for spec, failure in zip(specs, failures) if failure is None]
    errors = [
        {"image_path": spec.record().image_path, "error": failure}
        for spec, failure in zip(specs, failures)
        if failure is not None
    ]
    for error in errors:
        logger.warning(f"Phantom generation failed for {error['image_path']}: {error['error']}")

    source = {
        "dataset": f"phantom-{profile.name}",
        "seed": seed,
        "classes": list(classes),
        "per_class": per_class,
        "size": size,
        "quadrant": quadrant,
    }
    logger.info(f"✅ {len(records)}/{len(specs)} phantoms written under {out_dir}")
    return GenerationOutcome(manifest=Manifest(records, source, out_dir), errors=errors)


def mask_path_for(image_path: str, kind: str = "dense") -> str:
    """Relative path of the ground-truth mask written next to a generated image."""
    if kind not in ("dense", "artifact"):
        raise ValueError(f"unknown mask kind {kind!r}")
    return _mask_path(image_path, kind)


def expected_fraction_order(profile: PhantomProfile, seeds: int = 100, size: int = 64) -> Dict[str, float]:
    """Mean generated density fraction per class over a range of seeds."""
    means = {}
    for density in DENSITY_CLASSES:
        values = [
            generate_phantom(PhantomSpec(density=density, size=size, seed=s, profile=profile)).measured_fraction
            for s in range(seeds)
        ]
        means[density] = float(math.fsum(values) / len(values))
    return means
