"""
Pipeline subcommands behind main.py.

Each command reads its inputs (defaulting to the previous stage's outputs in
the run directory), writes into its own stage directory together with a
config snapshot and a summary.json, and returns that summary.
"""

import argparse
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from src.config import RunConfig
from src.constants import (
    CHECKPOINT_SUFFIX,
    CONFIG_SNAPSHOT_FILENAME,
    DENSITY_CLASSES,
    FOLDS_FILENAME,
    MANIFEST_FILENAME,
    REFERENCE_RATIOS,
    SPLIT_AUDIT_FILENAME,
    SUMMARY_FILENAME,
    WEIGHTS_FILENAME,
)
from src.data.cache import ImageCache, load_model_input
from src.data.image_io import write_rgb
from src.data.manifest import Manifest, filter_manifest, load_manifest, write_manifest
from src.data.phantom import generate_dataset, get_profile
from src.data.preprocessing import preprocess_manifest
from src.data.reports import simplify_report
from src.exceptions import ConfigError, DataError, DensityClipError, LeakageError
from src.models.checkpoint import load_checkpoint
from src.models.dual_encoder import ConvBlockConfig, DualEncoderModel, TextEncoderConfig, VisionEncoderConfig
from src.models.objective import ClassPromptSet, ClassWeights
from src.services.curation import (
    FoldAssignment,
    UndersamplePlan,
    audit_folds,
    class_weights,
    plan_from_minority,
    stratified_group_kfold,
    undersample,
)
from src.services.evaluation_service import evaluate, write_report_files, zero_shot_classify
from src.services.saliency_service import gradcam, overlay, save_raw_map
from src.services.training_service import TrainConfig, cross_validate
from src.utils.io import atomic_write_json, atomic_write_text, file_digest, prepare_output_dir
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


# ------------------------------------------------------------ shared helpers


def model_configs(config: RunConfig) -> Tuple[VisionEncoderConfig, TextEncoderConfig]:
    """Encoder configs from the run config."""
    try:
        vision = VisionEncoderConfig(
            input_size=config.input_size,
            conv_blocks=[
                ConvBlockConfig(channels=c, kernel=config.kernel, stride=config.pool_stride)
                for c in config.conv_channels
            ],
            embed_dim=config.embed_dim,
        )
        text = TextEncoderConfig(token_embed_dim=config.token_embed_dim, embed_dim=config.embed_dim)
    except ValidationError as e:
        raise ConfigError(f"Invalid model architecture: {e}") from e
    return vision, text


def prompt_set(classes: Sequence[str]) -> ClassPromptSet:
    """Prompt set for the given classes, in A-D order."""
    ordered = [c for c in DENSITY_CLASSES if c in set(classes)]
    return ClassPromptSet(classes=tuple(ordered), prompts=tuple(simplify_report(c) for c in ordered))


def present_classes(manifest: Manifest) -> List[str]:
    counts = manifest.class_counts()
    return [c for c in DENSITY_CLASSES if counts[c] > 0]


class Stage:
    """Output directory, provenance and summary of one subcommand run."""

    def __init__(self, command: str, config: RunConfig, output: Optional[str] = None):
        self.command = command
        self.config = config
        self.run_dir = Path(config.run_dir)
        name = output or command
        # a stage owns one directory inside the run directory
        if name in (".", "..") or Path(name).name != name:
            raise ConfigError(f"--output must be a plain directory name, got {name!r}")
        self.dir = prepare_output_dir(self.run_dir / name, config.overwrite)
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.errors: List[Dict[str, str]] = []
        self.details: Dict[str, Any] = {}
        atomic_write_text(self.dir / CONFIG_SNAPSHOT_FILENAME, config.to_env_text())

    def input(self, path: Path) -> Path:
        if not path.is_file():
            raise DataError(f"input not found: {path}")
        self.inputs[str(path)] = file_digest(path)
        return path

    def output(self, kind: str, path: Path) -> None:
        self.outputs[kind] = str(path)

    def finish(self) -> Dict[str, Any]:
        summary = {
            "command": self.command,
            "status": "partial" if self.errors else "ok",
            "seed": self.config.seed,
            "config": self.config.model_dump(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "errors": self.errors,
            "details": self.details,
        }
        atomic_write_json(self.dir / SUMMARY_FILENAME, summary)
        logger.info(f"{self.command}: summary written to {self.dir / SUMMARY_FILENAME}")
        return summary


def _default(path: Optional[str], fallback: Path) -> Path:
    return Path(path) if path else fallback


def _load_model(stage: Stage, checkpoint: Path) -> Tuple[DualEncoderModel, ClassPromptSet]:
    model, metadata = load_checkpoint(stage.input(checkpoint))
    classes = metadata.get("classes") or list(DENSITY_CLASSES)
    return model, prompt_set(classes)


# ------------------------------------------------------------ subcommands


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    stage = Stage("generate", config, args.output or "data")
    if args.class_list:
        classes = [c.strip().upper() for c in args.class_list.split(",") if c.strip()]
    else:
        if not 1 <= args.classes <= len(DENSITY_CLASSES):
            raise ConfigError(f"--classes must lie in [1, {len(DENSITY_CLASSES)}], got {args.classes}")
        classes = list(DENSITY_CLASSES[: args.classes])
    outcome = generate_dataset(
        stage.dir,
        classes=classes,
        per_class=args.per_class,
        seed=config.seed,
        size=args.size,
        profile=get_profile(args.profile),
        quadrant=args.quadrant,
        write_masks=not args.no_masks,
        jobs=config.jobs,
    )
    manifest = outcome.manifest
    stage.errors.extend(outcome.errors)
    stage.output("manifest", write_manifest(manifest, stage.dir / MANIFEST_FILENAME))
    stage.details = {
        "images": len(manifest),
        "failed": len(outcome.errors),
        "class_counts": manifest.class_counts(),
        "profile": args.profile,
    }
    return stage.finish()


def cmd_preprocess(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    stage = Stage("preprocess", config, args.output or "preprocessed")
    source = load_manifest(stage.input(_default(args.manifest, stage.run_dir / "data" / MANIFEST_FILENAME)))
    outcome = preprocess_manifest(source, stage.dir, size=args.size, jobs=config.jobs)
    stage.errors.extend(outcome.errors)
    stage.output("manifest", write_manifest(outcome.manifest, stage.dir / MANIFEST_FILENAME))
    stage.details = {"images": len(outcome.manifest), "failed": len(outcome.errors), "size": args.size}
    return stage.finish()


def cmd_split(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    stage = Stage("split", config, args.output or "split")
    manifest = load_manifest(stage.input(_default(args.manifest, stage.run_dir / "preprocessed" / MANIFEST_FILENAME)))

    if args.modalities:
        manifest = filter_manifest(manifest, modalities=[m.strip() for m in args.modalities.split(",")])
    if config.targets:
        try:
            plan = UndersamplePlan(targets=config.targets, seed=config.seed, shortfall=config.shortfall)
        except ValidationError as e:
            raise ConfigError(f"Invalid undersample targets: {e}") from e
        manifest = undersample(manifest, plan)
    elif args.minority_anchored:
        ratios = {c: REFERENCE_RATIOS[c] for c in present_classes(manifest)}
        manifest = undersample(manifest, plan_from_minority(manifest, ratios, config.seed, config.shortfall))

    classes = present_classes(manifest)
    assignment = stratified_group_kfold(manifest, k=args.k or config.k_folds, seed=config.seed, classes=classes)
    weights = class_weights(manifest, classes)
    audit = audit_folds(manifest, assignment, classes=classes)

    relocated = manifest.relocated(stage.dir)
    stage.output("manifest", write_manifest(relocated, stage.dir / MANIFEST_FILENAME))
    stage.output("folds", atomic_write_text(stage.dir / FOLDS_FILENAME, assignment.to_json()))
    stage.output("weights", atomic_write_json(stage.dir / WEIGHTS_FILENAME, weights.as_dict()))
    stage.output("audit", atomic_write_json(stage.dir / SPLIT_AUDIT_FILENAME, audit.model_dump()))
    stage.details = {
        "images": len(manifest),
        "class_counts": manifest.class_counts(classes),
        "k": assignment.k,
        "longitudinal_patients": len(assignment.longitudinal_patients),
        "leakage_free": audit.leakage_free,
        "balanced": audit.balanced,
        "max_proportion_deviation": audit.max_deviation,
        "weights": weights.as_dict(),
    }
    return stage.finish()


def _load_split(stage: Stage, split_dir: Path) -> Tuple[Manifest, FoldAssignment, ClassWeights]:
    manifest = load_manifest(stage.input(split_dir / MANIFEST_FILENAME))
    assignment = FoldAssignment.from_json(stage.input(split_dir / FOLDS_FILENAME).read_text(encoding="utf-8"))
    weights_path = split_dir / WEIGHTS_FILENAME
    if weights_path.is_file():
        weights = ClassWeights.from_mapping(json.loads(stage.input(weights_path).read_text(encoding="utf-8")))
    else:
        weights = class_weights(manifest, present_classes(manifest))
    return manifest, assignment, weights


def cmd_train(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    stage = Stage("train", config, args.output or "train")
    manifest, assignment, weights = _load_split(stage, _default(args.split_dir, stage.run_dir / "split"))
    prompts = prompt_set(weights.classes)
    vision, text = model_configs(config)
    train_config = TrainConfig.from_run_config(config, checkpoint_dir=stage.dir)
    cache = ImageCache(manifest, vision.input_size, jobs=config.jobs)

    results, report = cross_validate(
        manifest,
        cache,
        assignment,
        prompts,
        weights,
        train_config,
        model_factory=lambda: DualEncoderModel.initialize(vision, text, seed=config.seed),
        jobs=config.jobs,
        report_dir=stage.dir,
    )
    for result in results:
        stage.output(f"fold-{result.fold}", str(result.checkpoint))
    stage.output("cv_report", str(stage.dir / "cv_report.json"))
    stage.details = report["aggregate"]
    return stage.finish()


def _evaluate_checkpoint(
    stage: Stage,
    checkpoint: Path,
    manifest: Manifest,
    indices: Optional[List[int]],
    dataset: str,
) -> Dict[str, Any]:
    model, prompts = _load_model(stage, checkpoint)
    subset = manifest if indices is None else manifest.subset(indices)
    unknown = sorted({r.density for r in subset} - set(prompts.classes))
    if unknown:
        raise DataError(f"manifest has classes {unknown} the checkpoint was not trained on")
    cache = ImageCache(subset, model.vision_config.input_size, jobs=stage.config.jobs)
    images = cache.batch(list(range(len(subset))))
    report = evaluate(model, images, prompts.labels(subset.densities()), prompts, dataset, subset.records)
    paths = write_report_files(report, stage.dir, stem=dataset)
    for kind, path in paths.items():
        stage.output(f"{dataset}.{kind}", path)
    return report.model_dump()


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    stage = Stage("evaluate", config, args.output or "evaluate")
    split_dir = _default(args.split_dir, stage.run_dir / "split")
    manifest = load_manifest(stage.input(_default(args.manifest, split_dir / MANIFEST_FILENAME)))
    folds_path = split_dir / FOLDS_FILENAME
    assignment = FoldAssignment.from_json(stage.input(folds_path).read_text()) if folds_path.is_file() else None

    if args.audit_split:
        if assignment is None:
            raise DataError(f"--audit-split needs {folds_path}")
        audit = audit_folds(manifest, assignment, classes=present_classes(manifest))
        stage.details["audit"] = audit.model_dump()
        stage.output("audit", atomic_write_json(stage.dir / SPLIT_AUDIT_FILENAME, audit.model_dump()))
        if not audit.leakage_free:
            stage.finish()
            raise LeakageError(f"fold assignment leaks patients: {audit.leaking_patients or audit.uncovered_patients}")

    train_dir = stage.run_dir / "train"
    if args.checkpoint:
        checkpoints = [(args.fold, Path(args.checkpoint))]
    else:
        checkpoints = sorted(
            (int(p.stem.split("-")[1]), p) for p in train_dir.glob(f"fold-*{CHECKPOINT_SUFFIX}")
        )
        if args.fold is not None:
            checkpoints = [(f, p) for f, p in checkpoints if f == args.fold]
        if not checkpoints and not args.audit_split:
            raise DataError(f"no checkpoints found under {train_dir}")

    reports = {}
    for fold, checkpoint in checkpoints:
        try:
            if fold is not None and assignment is not None:
                _, indices = assignment.fold_indices(manifest, fold)
                dataset = f"fold-{fold}-validation"
            else:
                indices, dataset = None, manifest.source.get("dataset", "manifest")
            reports[dataset] = _evaluate_checkpoint(stage, checkpoint, manifest, indices, dataset)
        except DensityClipError as e:
            logger.error(f"Evaluation of {checkpoint} failed: {e}", exc_info=True)
            stage.errors.append({"checkpoint": str(checkpoint), "error": f"{type(e).__name__}: {e}"})
    stage.details["reports"] = reports
    return stage.finish()


def cmd_zero_shot(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    stage = Stage("zero-shot", config, args.output or "zero-shot")
    manifest = load_manifest(stage.input(Path(args.manifest)))
    checkpoint = _default(args.checkpoint, stage.run_dir / "train" / f"fold-0{CHECKPOINT_SUFFIX}")
    dataset = args.dataset or manifest.source.get("dataset", "external")
    stage.details["report"] = _evaluate_checkpoint(stage, checkpoint, manifest, None, dataset)
    return stage.finish()


def cmd_gradcam(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    stage = Stage("gradcam", config, args.output or "gradcam")
    checkpoint = _default(args.checkpoint, stage.run_dir / "train" / f"fold-0{CHECKPOINT_SUFFIX}")
    model, prompts = _load_model(stage, checkpoint)
    size = model.vision_config.input_size

    if args.images:
        items = [(Path(p), args.target_class) for p in args.images]
    else:
        manifest = load_manifest(stage.input(_default(args.manifest, stage.run_dir / "split" / MANIFEST_FILENAME)))
        records = manifest.records[: args.limit]
        items = [(manifest.resolve(r), args.target_class or r.density) for r in records]

    maps = []
    for path, target_class in items:
        try:
            image = load_model_input(path, size)
            if target_class is None:
                target_class = prompts.classes[int(zero_shot_classify(model, image, prompts).labels[0])]
            saliency = gradcam(model, image, target_class, prompts, config.gradcam_target, str(path))
            out = stage.dir / f"{path.stem}_gradcam.png"
            write_rgb(out, overlay(image, saliency.grid, config.overlay_alpha))
            if args.raw:
                save_raw_map(stage.dir / f"{path.stem}_gradcam.f32", saliency.raw)
            maps.append({"image": str(path), "target_class": target_class, "score": saliency.score, "overlay": str(out)})
        except (DensityClipError, OSError) as e:
            logger.error(f"GradCAM failed for {path}: {e}", exc_info=True)
            stage.errors.append({"image_path": str(path), "error": f"{type(e).__name__}: {e}"})
    stage.details = {"maps": maps, "target": config.gradcam_target, "alpha": config.overlay_alpha}
    return stage.finish()


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "zero-shot": cmd_zero_shot,
    "gradcam": cmd_gradcam,
}
