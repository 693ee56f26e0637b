from typing import Final

# Density classes and their simplified report prompts
DENSITY_CLASSES: Final[tuple] = ("A", "B", "C", "D")

DENSITY_PROMPTS: Final[dict] = {
    "A": "fatty or almost entirely fatty breasts",
    "B": "scattered areas of fibroglandular density",
    "C": "heterogeneously dense breasts",
    "D": "extremely dense breasts",
}

MODALITIES: Final[tuple] = ("s2D", "DM", "DBT")

# Share of images per modality used by the phantom generator
MODALITY_MIX: Final[dict] = {"s2D": 0.50, "DM": 0.25, "DBT": 0.25}

# Relative tissue contrast per modality (DBT central slices are flatter)
MODALITY_CONTRAST: Final[dict] = {"s2D": 1.00, "DM": 0.95, "DBT": 0.85}

SITES: Final[tuple] = ("site-1", "site-2")
SITE_MIX: Final[dict] = {"site-1": 0.67, "site-2": 0.33}

VIEWS: Final[tuple] = ("CC", "MLO")

# Dense-tissue area fraction of the foreground, per class
DENSITY_RANGES: Final[dict] = {
    "A": (0.00, 0.10),
    "B": (0.15, 0.30),
    "C": (0.35, 0.55),
    "D": (0.60, 0.85),
}

OVERLAPPING_DENSITY_RANGES: Final[dict] = {
    "A": (0.00, 0.22),
    "B": (0.12, 0.42),
    "C": (0.30, 0.65),
    "D": (0.52, 0.85),
}

# Final class distribution selected after the undersampling experiments
REFERENCE_TARGETS: Final[dict] = {"A": 4000, "B": 6000, "C": 6000, "D": 3000}
REFERENCE_RATIOS: Final[dict] = {"A": 4 / 3, "B": 2.0, "C": 2.0, "D": 1.0}

# Preprocessing
PREPROCESS_SIZE: Final[int] = 224
MIN_RAW_SIZE: Final[int] = 32
SATURATION_THRESHOLD: Final[float] = 0.98
ANNOTATION_MAX_AREA: Final[float] = 0.02

# Model defaults
DEFAULT_EMBED_DIM: Final[int] = 64
DEFAULT_TOKEN_EMBED_DIM: Final[int] = 32
DEFAULT_CONV_CHANNELS: Final[tuple] = (8, 16, 32, 32)
INITIAL_LOG_TEMPERATURE: Final[float] = 2.302585092994046  # ln(10)
MAX_LOG_TEMPERATURE: Final[float] = 4.605170185988092  # ln(100)

# Training defaults
DEFAULT_EPOCHS: Final[int] = 20
DEFAULT_BATCH_SIZE: Final[int] = 32
DEFAULT_LEARNING_RATE: Final[float] = 1e-3
DEFAULT_K_FOLDS: Final[int] = 5

# Curation
FOLD_PROPORTION_TOLERANCE: Final[float] = 0.20

# Saliency
DEFAULT_OVERLAY_ALPHA: Final[float] = 0.4

# Numerical guards
NORM_EPSILON: Final[float] = 1e-12
LAYER_NORM_EPSILON: Final[float] = 1e-5
GRADCHECK_TOLERANCE: Final[float] = 1e-4

# CLI exit codes
EXIT_OK: Final[int] = 0
EXIT_CONFIG_ERROR: Final[int] = 1
EXIT_DATA_ERROR: Final[int] = 2
EXIT_NUMERICAL_ERROR: Final[int] = 3
EXIT_IO_ERROR: Final[int] = 4

# File names inside a run directory
MANIFEST_FILENAME: Final[str] = "manifest.jsonl"
FOLDS_FILENAME: Final[str] = "folds.json"
WEIGHTS_FILENAME: Final[str] = "weights.json"
SUMMARY_FILENAME: Final[str] = "summary.json"
CONFIG_SNAPSHOT_FILENAME: Final[str] = "config.env"
CV_REPORT_FILENAME: Final[str] = "cv_report.json"
SPLIT_AUDIT_FILENAME: Final[str] = "split_audit.json"
CHECKPOINT_SUFFIX: Final[str] = ".nta"
