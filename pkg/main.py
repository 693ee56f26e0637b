"""
DensityCLIP - breast-density classification with a desk-scale dual encoder
Command-line entry point: generate, preprocess, split, train, evaluate,
zero-shot and gradcam subcommands over a shared run directory
"""

import argparse
import io
import sys
from typing import Dict, List, Optional

# Configure UTF-8 encoding for Windows console
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')
    sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding='utf-8')

from src.commands import COMMANDS
from src.config import Config, load_run_config
from src.constants import EXIT_DATA_ERROR, EXIT_IO_ERROR, EXIT_OK, PREPROCESS_SIZE
from src.exceptions import ConfigError, DensityClipError
from src.utils.logger import set_level, setup_logger

logger = setup_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", help="Run directory (default: $DENSITYCLIP_RUN_DIR or 'runs')")
    common.add_argument("--config", help="KEY=VALUE run configuration file")
    common.add_argument("--seed", type=int, help="Global seed; every random choice derives from it")
    common.add_argument("--jobs", type=int, help="Parallel workers for per-image work and folds")
    common.add_argument("--overwrite", action="store_true", default=None, help="Replace existing stage outputs")
    common.add_argument("--output", help="Stage directory name inside the run directory")
    common.add_argument("--log-level", help="Logging level (default: $LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(
        prog="densityclip",
        description="Breast-density classification pipeline with phantom data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", parents=[common], help="Generate a phantom dataset and manifest")
    generate.add_argument("--classes", type=int, default=4, help="Use the first N density classes")
    generate.add_argument("--class-list", help="Explicit classes, e.g. A,D")
    generate.add_argument("--per-class", type=int, default=250)
    generate.add_argument("--size", type=int, default=256, help="Raw phantom size in pixels")
    generate.add_argument("--profile", default="standard", choices=["standard", "shifted", "overlapping"])
    generate.add_argument("--quadrant", type=int, choices=[0, 1, 2, 3], help="Confine dense tissue to a quadrant")
    generate.add_argument("--no-masks", action="store_true", help="Skip ground-truth mask files")

    preprocess = sub.add_parser("preprocess", parents=[common], help="Clean, crop, resize and normalize images")
    preprocess.add_argument("--manifest", help="Input manifest (default: <run-dir>/data/manifest.jsonl)")
    preprocess.add_argument("--size", type=int, default=PREPROCESS_SIZE)

    split = sub.add_parser("split", parents=[common], help="Undersample, weight classes and build k folds")
    split.add_argument("--manifest", help="Input manifest (default: <run-dir>/preprocessed/manifest.jsonl)")
    split.add_argument("--k", type=int, help="Number of folds (default: K_FOLDS)")
    split.add_argument("--targets", help="Undersample targets, e.g. A=400,B=600,C=600,D=300")
    split.add_argument("--minority-anchored", action="store_true", help="Undersample to the 4:6:6:3 ratios")
    split.add_argument("--modalities", help="Keep only these modalities, e.g. s2D")

    train = sub.add_parser("train", parents=[common], help="Cross-validate the dual encoder")
    train.add_argument("--split-dir", help="Split stage directory (default: <run-dir>/split)")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--learning-rate", type=float)
    train.add_argument("--optimizer", choices=["adam", "sgd"])
    train.add_argument("--input-size", type=int)
    train.add_argument("--conv-channels", help="Comma-separated channels per conv block")
    train.add_argument("--patience", type=int)

    evaluate = sub.add_parser("evaluate", parents=[common], help="Evaluate checkpoints on their validation folds")
    evaluate.add_argument("--checkpoint", help="Single checkpoint (default: every fold checkpoint)")
    evaluate.add_argument("--fold", type=int, help="Restrict to one fold's validation set")
    evaluate.add_argument("--manifest", help="Manifest (default: <split-dir>/manifest.jsonl)")
    evaluate.add_argument("--split-dir", help="Split stage directory (default: <run-dir>/split)")
    evaluate.add_argument("--audit-split", action="store_true", help="Check folds.json for patient leakage")

    zero_shot = sub.add_parser("zero-shot", parents=[common], help="Zero-shot evaluation on an external manifest")
    zero_shot.add_argument("--manifest", required=True)
    zero_shot.add_argument("--checkpoint", help="Checkpoint (default: <run-dir>/train/fold-0.nta)")
    zero_shot.add_argument("--dataset", help="Dataset name in the report")

    gradcam = sub.add_parser("gradcam", parents=[common], help="GradCAM overlays for images")
    gradcam.add_argument("images", nargs="*", help="Preprocessed image files")
    gradcam.add_argument("--checkpoint", help="Checkpoint (default: <run-dir>/train/fold-0.nta)")
    gradcam.add_argument("--manifest", help="Take images from a manifest when none are listed")
    gradcam.add_argument("--limit", type=int, default=16)
    gradcam.add_argument("--target-class", help="Class prompt to explain (default: label or prediction)")
    gradcam.add_argument("--target", choices=["similarity", "probability"], dest="gradcam_target")
    gradcam.add_argument("--raw", action="store_true", help="Also write raw float32 maps")

    return parser


# Flags that override RunConfig fields of the same name
CONFIG_FLAGS = (
    "run_dir", "seed", "jobs", "overwrite", "epochs", "batch_size", "learning_rate", "optimizer",
    "input_size", "conv_channels", "patience", "targets", "gradcam_target",
)


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {name: getattr(args, name) for name in CONFIG_FLAGS if getattr(args, name, None) is not None}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.log_level:
            set_level(args.log_level)
        Config.validate()
        config = load_run_config(args.config, _overrides(args))
        logger.info(f"Running {args.command} (run_dir={config.run_dir}, seed={config.seed})")
        summary = COMMANDS[args.command](args, config)
    except DensityClipError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=not isinstance(e, ConfigError))
        return e.exit_code
    except ValueError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_DATA_ERROR
    except OSError as e:
        logger.error(f"{args.command} failed with an I/O error: {e}", exc_info=True)
        return EXIT_IO_ERROR

    if summary["errors"]:
        logger.error(f"{args.command} finished with {len(summary['errors'])} failed item(s)")
        return EXIT_DATA_ERROR
    logger.info(f"✅ {args.command} finished")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
