#!/usr/bin/env python3
"""
Desk-scale acceptance run: property checks plus the phantom experiments

Usage:
    python scripts/acceptance.py [--seed 7] [--jobs 4] [--only 1,2,5]

Prints PASS/FAIL per criterion and exits 1 if any criterion fails.
"""

import argparse
import math
import os
import sys
import tempfile
import time
from collections import Counter
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Callable, Dict, List, Optional, Sequence, Tuple

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import numpy as np

from src.autodiff.gradcheck import GRADIENT_CASES, check_op
from src.commands import model_configs
from src.config import RunConfig
from src.constants import DENSITY_CLASSES, GRADCHECK_TOLERANCE, REFERENCE_TARGETS
from src.data.cache import ImageCache
from src.data.manifest import ImageRecord, Manifest
from src.data.phantom import (
    PROFILES,
    ArtifactFlags,
    PhantomProfile,
    PhantomSpec,
    generate_phantom,
    plan_dataset,
)
from src.data.preprocessing import preprocess
from src.models.checkpoint import load_checkpoint
from src.models.dual_encoder import DualEncoderModel
from src.models.objective import ClassPromptSet, ClassWeights, weighted_contrastive_loss
from src.services.curation import audit_folds, class_weights, stratified_group_kfold
from src.services.evaluation_service import auc_one_vs_rest, evaluate, report_from_scores, zero_shot_classify
from src.services.saliency_service import gradcam, mass_fraction, saliency_centroid
from src.services.training_service import FoldResult, TrainConfig, Trainer, cross_validate, train_fold
from src.utils.logger import set_level, setup_logger

logger = setup_logger(__name__)

# Desk-scale architecture and training schedule
DESK_RUN = RunConfig(
    input_size=64,
    conv_channels=[8, 16, 32],
    embed_dim=32,
    token_embed_dim=16,
    epochs=12,
    batch_size=32,
    learning_rate=3e-3,
)
RAW_SIZE = 128
FIXTURE_PER_CLASS = 250
MAX_E2E_SECONDS = 15 * 60


@dataclass
class Outcome:
    criterion: int
    title: str
    passed: bool
    detail: str


@dataclass
class Fixture:
    manifest: Manifest
    images: np.ndarray  # (n, s, s) preprocessed
    masks: Dict[str, np.ndarray]  # kind -> (n, s, s) bool


def build_fixture(specs: Sequence[PhantomSpec], size: int, name: str) -> Fixture:
    """Render and preprocess phantoms in memory, carrying masks through the crop."""
    images, records = [], []
    masks: Dict[str, List[np.ndarray]] = {"dense": [], "artifact": []}
    for spec in specs:
        phantom = generate_phantom(spec)
        result = preprocess(
            phantom.image, size, {"dense": phantom.dense_mask, "artifact": phantom.artifact_mask}
        )
        images.append(result.image)
        records.append(phantom.record)
        for kind in masks:
            masks[kind].append(result.masks[kind])
    manifest = Manifest(records, {"dataset": name, "size": size}, None)
    return Fixture(manifest, np.stack(images), {k: np.stack(v) for k, v in masks.items()})


def desk_model_factory(seed: int) -> Callable[[], DualEncoderModel]:
    vision, text = model_configs(DESK_RUN)
    return lambda: DualEncoderModel.initialize(vision, text, seed=seed)


def desk_prompts() -> ClassPromptSet:
    return ClassPromptSet.default()


# ------------------------------------------------------------ property criteria


def criterion_gradients(seed: int) -> Outcome:
    started = time.perf_counter()
    worst: Dict[str, float] = {}
    for name in GRADIENT_CASES:
        worst[name] = max(check_op(name, seed + s) for s in range(20))
    elapsed = time.perf_counter() - started
    failing = [n for n, e in worst.items() if e >= GRADCHECK_TOLERANCE]
    top = max(worst.values())
    return Outcome(
        1,
        "Autodiff finite-difference checks",
        not failing and elapsed < 60.0,
        f"{len(worst)} ops x 20 seeds, max error {top:.1e}, {elapsed:.1f}s"
        + (f", failing: {', '.join(failing)}" if failing else ""),
    )


def _unweighted_ce(similarities: np.ndarray, labels: np.ndarray) -> float:
    shifted = similarities - similarities.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(labels.size), labels].mean())


def criterion_loss(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    worst_uniform = 0.0
    worst_scaled = 0.0
    classes = DENSITY_CLASSES
    for _ in range(50):
        n = int(rng.integers(1, 16))
        sims = rng.normal(scale=3.0, size=(n, 4))
        labels = rng.integers(0, 4, size=n)
        uniform = weighted_contrastive_loss(sims, labels, ClassWeights.uniform(classes)).item()
        worst_uniform = max(worst_uniform, abs(uniform - _unweighted_ce(sims, labels)))
        weights = ClassWeights(classes, tuple(rng.uniform(0.2, 3.0, size=4)))
        base = weighted_contrastive_loss(sims, labels, weights).item()
        rescaled = weighted_contrastive_loss(sims, labels, weights.scaled(float(rng.uniform(0.1, 10.0)))).item()
        worst_scaled = max(worst_scaled, abs(base - rescaled))

    flat = weighted_contrastive_loss(np.zeros((1, 4)), [2], ClassWeights.uniform(classes)).item()
    two = weighted_contrastive_loss(np.array([[1.0, 0.0]]), [0], ClassWeights(("A", "B"), (2.0, 1.0))).item()
    passed = (
        worst_uniform <= 1e-12
        and worst_scaled <= 1e-12
        and abs(flat - math.log(4.0)) <= 1e-6
        and abs(two - 0.313262) <= 1e-6
    )
    return Outcome(
        2,
        "Loss contract",
        passed,
        f"uniform {worst_uniform:.1e}, rescaled {worst_scaled:.1e}, ln4 case {flat:.6f}, 2-class case {two:.6f}",
    )


def criterion_class_weights() -> Outcome:
    weights = class_weights(REFERENCE_TARGETS)
    expected = {"A": 1.1875, "B": 0.791667, "C": 0.791667, "D": 1.583333}
    values = weights.as_dict()
    error = max(abs(values[c] - expected[c]) for c in expected)
    mean = weights.image_mean(REFERENCE_TARGETS)
    return Outcome(
        3,
        "Inverse-frequency class weights",
        error <= 1e-6 and abs(mean - 1.0) <= 1e-9,
        f"weights {', '.join(f'{c}={v:.6f}' for c, v in values.items())}, image-weighted mean {mean:.12f}",
    )


def random_manifest(rng: np.random.Generator) -> Manifest:
    """Random patients with 1-4 images per study; some with a second study."""
    patients = int(rng.integers(300, 501))
    records = []
    for p in range(patients):
        density = DENSITY_CLASSES[int(rng.choice(4, p=[0.2, 0.3, 0.3, 0.2]))]
        studies = 2 if rng.random() < 0.1 else 1
        for s in range(studies):
            for v in range(int(rng.integers(1, 5))):
                records.append(
                    ImageRecord(
                        patient_id=f"p{p}",
                        study_id=f"p{p}-s{s}",
                        image_path=f"images/p{p}_s{s}_{v}.png",
                        modality="s2D",
                        density=density,
                        site="site-1",
                        acquired_at=date(2016, 1, 1) + timedelta(days=400 * s),
                    )
                )
    return Manifest(records, {"dataset": "random"}, None)


def recount(manifest: Manifest, assignment) -> Tuple[bool, float]:
    """Independent oracle: leakage and coverage from raw records, worst proportion deviation."""
    studies: Dict[str, set] = {}
    for r in manifest.records:
        studies.setdefault(r.patient_id, set()).add(r.study_id)
    longitudinal = {p for p, s in studies.items() if len(s) > 1}
    single = set(studies) - longitudinal

    ok = True
    validation_count: Counter = Counter()
    for split in assignment.folds.values():
        train, val = set(split.train_patients), set(split.val_patients)
        ok &= not (train & val)
        ok &= not (val & longitudinal)
        ok &= longitudinal <= train
        validation_count.update(val)
    ok &= all(validation_count[p] == 1 for p in single)
    ok &= set(validation_count) == single

    pool = [r.density for r in manifest.records if r.patient_id in single]
    share = {c: n / len(pool) for c, n in Counter(pool).items()}
    worst = 0.0
    for split in assignment.folds.values():
        val = set(split.val_patients)
        fold = Counter(r.density for r in manifest.records if r.patient_id in val)
        total = sum(fold.values())
        for c, s in share.items():
            worst = max(worst, abs(fold[c] / total - s) / s)
    return ok, worst


def criterion_splitter(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    leaks = 0
    worst = 0.0
    disagreements = 0
    for trial in range(100):
        manifest = random_manifest(rng)
        assignment = stratified_group_kfold(manifest, k=5, seed=seed + trial)
        ok, deviation = recount(manifest, assignment)
        audit = audit_folds(manifest, assignment)
        leaks += not ok
        disagreements += ok != audit.leakage_free
        worst = max(worst, deviation)
    return Outcome(
        4,
        "Patient-safe stratified group k-fold",
        leaks == 0 and disagreements == 0 and worst <= 0.20,
        f"100 manifests, {leaks} unsafe, audit disagreements {disagreements}, worst proportion deviation {worst:.1%}",
    )


def brute_force_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels]
    neg = scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def criterion_auc(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[1] = True, False
        # coarse rounding produces ties
        scores = np.round(rng.normal(size=n) + labels * rng.uniform(0, 2), int(rng.integers(0, 3)))
        worst = max(worst, abs(auc_one_vs_rest(scores, labels) - brute_force_auc(scores, labels)))
    return Outcome(5, "Rank AUC equals brute-force pair counting", worst <= 1e-9, f"max difference {worst:.1e}")


# ------------------------------------------------------------ phantom experiments


def standard_fixture(seed: int, profile: PhantomProfile, name: str) -> Fixture:
    specs = plan_dataset(DENSITY_CLASSES, FIXTURE_PER_CLASS, seed, RAW_SIZE, profile)
    return build_fixture(specs, DESK_RUN.input_size, name)


def train_config(seed: int, checkpoint_dir: Optional[str] = None) -> TrainConfig:
    return TrainConfig.from_run_config(DESK_RUN.model_copy(update={"seed": seed}), checkpoint_dir)


def criterion_end_to_end(seed: int, jobs: int, workdir: str) -> Tuple[List[Outcome], Fixture, List[FoldResult]]:
    started = time.perf_counter()
    fixture = standard_fixture(seed, PROFILES["standard"], "phantom-standard")
    cache = ImageCache.from_arrays(fixture.manifest, fixture.images)
    assignment = stratified_group_kfold(fixture.manifest, k=5, seed=seed)
    prompts = desk_prompts()
    weights = class_weights(fixture.manifest)
    results, report = cross_validate(
        fixture.manifest,
        cache,
        assignment,
        prompts,
        weights,
        train_config(seed, workdir),
        desk_model_factory(seed),
        jobs=jobs,
        report_dir=workdir,
    )
    elapsed = time.perf_counter() - started
    accuracy = report["aggregate"]["accuracy"]["mean"]
    min_auc = min(
        auc for r in results for auc in r.report.per_class_auc.values() if auc is not None
    )
    outcomes = [
        Outcome(
            6,
            "Desk-scale 5-fold cross-validation",
            accuracy >= 0.90 and min_auc >= 0.95 and elapsed <= MAX_E2E_SECONDS,
            f"mean accuracy {accuracy:.3f}, min per-class AUC {min_auc:.3f}, {elapsed:.0f}s",
        )
    ]

    rerun = train_fold(
        desk_model_factory(seed)(),
        fixture.manifest,
        cache,
        assignment,
        0,
        prompts,
        weights,
        train_config(seed),
    )
    same = rerun.log.numbers() == results[0].log.numbers() and rerun.report == results[0].report
    outcomes.append(Outcome(6, "Same-seed rerun is bit-exact", same, f"fold 0, {len(rerun.log.entries)} epochs"))

    model, metadata = load_checkpoint(results[0].checkpoint)
    _, val_idx = assignment.fold_indices(fixture.manifest, 0)
    trainer = Trainer(train_config(seed), prompts, weights)
    labels = prompts.labels(fixture.manifest.densities())
    loss, acc, _ = trainer.validation_metrics(model, cache, val_idx, labels)
    reloaded = evaluate(
        model,
        cache.batch(list(val_idx)),
        labels[val_idx],
        prompts,
        "fold-0-validation",
        [fixture.manifest[i] for i in val_idx],
    )
    best = results[0].log.best_entry
    exact = loss == best.val_loss and acc == best.val_accuracy and reloaded == results[0].report
    outcomes.append(
        Outcome(10, "Checkpoint save/load reproduces validation metrics", exact, f"epoch {metadata['epoch']}")
    )
    return outcomes, fixture, results


def criterion_adjacent(seed: int) -> Outcome:
    fixture = standard_fixture(seed + 1, PROFILES["overlapping"], "phantom-overlapping")
    cache = ImageCache.from_arrays(fixture.manifest, fixture.images)
    assignment = stratified_group_kfold(fixture.manifest, k=5, seed=seed)
    result = train_fold(
        desk_model_factory(seed)(),
        fixture.manifest,
        cache,
        assignment,
        0,
        desk_prompts(),
        class_weights(fixture.manifest),
        train_config(seed),
    )
    fraction = result.report.adjacent_error_fraction
    return Outcome(
        7,
        "Errors fall between adjacent classes",
        fraction is None or fraction >= 0.80,
        f"accuracy {result.report.overall_accuracy:.3f}, adjacent share of errors "
        + ("n/a (no errors)" if fraction is None else f"{fraction:.1%}"),
    )


def quadrant_spec(density: str, fraction: float, quadrant: int, seed: int, **kwargs) -> PhantomSpec:
    return PhantomSpec(
        density=density,
        size=RAW_SIZE,
        density_fraction=fraction,
        quadrant=quadrant,
        seed=seed,
        patient_id=f"q{seed}",
        image_path=f"images/q{seed}_{quadrant}.png",
        **kwargs,
    )


def criterion_saliency(seed: int, model: DualEncoderModel) -> List[Outcome]:
    prompts = desk_prompts()
    size = DESK_RUN.input_size
    rng = np.random.default_rng([seed, 8])

    # odd quadrants hold about a fifth of the foreground
    specs = []
    for i in range(50):
        density = "A" if i % 2 else "B"
        fraction = float(rng.uniform(0.05, 0.10) if density == "A" else rng.uniform(0.15, 0.16))
        specs.append(quadrant_spec(density, fraction, int(rng.integers(0, 4)), 10_000 + i))
    held_out = build_fixture(specs, size, "phantom-quadrant")
    masses = [
        mass_fraction(gradcam(model, held_out.images[i], r.density, prompts).grid, held_out.masks["dense"][i])
        for i, r in enumerate(held_out.manifest)
    ]
    mean_mass = float(np.mean(masses))

    tracked = 0
    for i in range(20):
        pair = [quadrant_spec("B", 0.2, q, 20_000 + i) for q in (0, 2)]
        fixture = build_fixture(pair, size, "phantom-pair")
        upper, lower = (saliency_centroid(gradcam(model, img, "B", prompts).grid) for img in fixture.images)
        tracked += upper is not None and lower is not None and lower[0] > upper[0]

    artifacts = []
    for i, flags in enumerate(
        [ArtifactFlags(paddle_mark=True), ArtifactFlags(implant=True), ArtifactFlags(burned_in_text=True)] * 10
    ):
        spec = PhantomSpec(
            density=DENSITY_CLASSES[i % 4], size=RAW_SIZE, artifacts=flags, seed=30_000 + i, patient_id=f"a{i}"
        )
        fixture = build_fixture([spec], size, "phantom-artifact")
        grid = gradcam(model, fixture.images[0], spec.density, prompts).grid
        artifacts.append(mass_fraction(grid, fixture.masks["artifact"][0]))
    artifact_mass = float(np.mean(artifacts))

    return [
        Outcome(8, "GradCAM mass on dense tissue", mean_mass >= 0.60, f"mean {mean_mass:.1%} over 50 phantoms"),
        Outcome(8, "GradCAM centroid follows the dense blob", tracked == 20, f"{tracked}/20 pairs"),
        Outcome(8, "GradCAM mass on artifacts", artifact_mass < 0.20, f"mean {artifact_mass:.1%} over 30 phantoms"),
    ]


def criterion_zero_shot(seed: int, model: DualEncoderModel) -> Outcome:
    specs = plan_dataset(DENSITY_CLASSES, 60, seed + 2, RAW_SIZE, PROFILES["shifted"])
    fixture = build_fixture(specs, DESK_RUN.input_size, "phantom-shifted")
    prompts = desk_prompts()
    result = zero_shot_classify(model, fixture.images, prompts)
    labels = prompts.labels(fixture.manifest.densities())
    report = report_from_scores(result.scores, labels, prompts.classes, "phantom-shifted")
    min_auc = min(v for v in report.per_class_auc.values() if v is not None)
    return Outcome(
        9,
        "Zero-shot transfer to a shifted profile",
        min_auc >= 0.85,
        f"per-class AUC {', '.join(f'{c}={v:.3f}' for c, v in report.per_class_auc.items())}",
    )


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--only", help="Comma-separated criteria to run (default: all)")
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args()
    set_level(args.log_level)
    selected = {int(c) for c in args.only.split(",")} if args.only else set(range(1, 11))

    print("=" * 60)
    print("DESK-SCALE ACCEPTANCE")
    print("=" * 60)
    print()

    outcomes: List[Outcome] = []
    if 1 in selected:
        outcomes.append(criterion_gradients(args.seed))
    if 2 in selected:
        outcomes.append(criterion_loss(args.seed))
    if 3 in selected:
        outcomes.append(criterion_class_weights())
    if 4 in selected:
        outcomes.append(criterion_splitter(args.seed))
    if 5 in selected:
        outcomes.append(criterion_auc(args.seed))

    if selected & {6, 8, 9, 10}:
        with tempfile.TemporaryDirectory() as workdir:
            trained, _, results = criterion_end_to_end(args.seed, args.jobs, workdir)
            outcomes.extend(o for o in trained if o.criterion in selected)
            model = results[0].model
            if 8 in selected:
                outcomes.extend(criterion_saliency(args.seed, model))
            if 9 in selected:
                outcomes.append(criterion_zero_shot(args.seed, model))
    if 7 in selected:
        outcomes.append(criterion_adjacent(args.seed))

    for outcome in sorted(outcomes, key=lambda o: o.criterion):
        mark = "✅ PASS" if outcome.passed else "❌ FAIL"
        print(f"{mark}  [{outcome.criterion:>2}] {outcome.title}")
        print(f"          {outcome.detail}")
    print()

    failed = sum(not o.passed for o in outcomes)
    print("=" * 60)
    print("✅ ALL CRITERIA PASSED" if not failed else f"❌ {failed} CRITERIA FAILED")
    print("=" * 60)
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
