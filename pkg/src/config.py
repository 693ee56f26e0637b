"""
Configuration module for DensityCLIP
Loads environment defaults and the plain-text run configuration file
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.constants import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_CONV_CHANNELS,
    DEFAULT_EMBED_DIM,
    DEFAULT_EPOCHS,
    DEFAULT_K_FOLDS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_OVERLAY_ALPHA,
    DEFAULT_TOKEN_EMBED_DIM,
    PREPROCESS_SIZE,
)
from src.exceptions import ConfigError

load_dotenv()


class Config:
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    RUN_DIR: str = os.getenv("DENSITYCLIP_RUN_DIR", "runs")
    SEED: str = os.getenv("DENSITYCLIP_SEED", "7")
    JOBS: str = os.getenv("DENSITYCLIP_JOBS", "1")

    @classmethod
    def validate(cls):
        errors = []
        try:
            int(cls.SEED)
        except ValueError:
            errors.append(f"DENSITYCLIP_SEED must be an integer, got {cls.SEED!r}")
        try:
            if int(cls.JOBS) < 1:
                errors.append("DENSITYCLIP_JOBS must be >= 1")
        except ValueError:
            errors.append(f"DENSITYCLIP_JOBS must be an integer, got {cls.JOBS!r}")

        if errors:
            raise ConfigError("; ".join(errors))

        return True

    @classmethod
    def default_seed(cls) -> int:
        return int(cls.SEED)

    @classmethod
    def default_jobs(cls) -> int:
        return int(cls.JOBS)


class RunConfig(BaseModel):
    """Merged run configuration (config file + CLI overrides)."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default_factory=Config.default_seed)
    jobs: int = Field(default_factory=Config.default_jobs, ge=1)
    run_dir: str = Field(default_factory=lambda: Config.RUN_DIR)
    overwrite: bool = False

    # training
    epochs: int = Field(DEFAULT_EPOCHS, gt=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, gt=0)
    learning_rate: float = Field(DEFAULT_LEARNING_RATE, ge=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    patience: Optional[int] = Field(None, gt=0)

    # model
    input_size: int = Field(PREPROCESS_SIZE, gt=0)
    conv_channels: List[int] = Field(default_factory=lambda: list(DEFAULT_CONV_CHANNELS))
    kernel: int = Field(3, gt=0)
    pool_stride: int = Field(2, gt=0)
    embed_dim: int = Field(DEFAULT_EMBED_DIM, gt=0)
    token_embed_dim: int = Field(DEFAULT_TOKEN_EMBED_DIM, gt=0)

    # curation
    k_folds: int = Field(DEFAULT_K_FOLDS, ge=2)
    shortfall: Literal["take-all", "strict"] = "take-all"
    targets: Optional[Dict[str, int]] = None

    # saliency
    gradcam_target: Literal["similarity", "probability"] = "similarity"
    overlay_alpha: float = Field(DEFAULT_OVERLAY_ALPHA, ge=0.0, le=1.0)

    @field_validator("conv_channels", mode="before")
    @classmethod
    def _split_channels(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [int(part) for part in value.split(",") if part.strip()]
        return value

    @field_validator("targets", mode="before")
    @classmethod
    def _split_targets(cls, value: Any) -> Any:
        # "A=4000,B=6000" form used in config files and flags
        if isinstance(value, str):
            targets = {}
            for part in value.split(","):
                if not part.strip():
                    continue
                name, _, count = part.partition("=")
                targets[name.strip().upper()] = int(count)
            return targets
        return value

    def to_env_text(self) -> str:
        """Render the config in the same KEY=VALUE form it is loaded from."""
        lines = []
        for name, value in self.model_dump().items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, dict):
                value = ",".join(f"{k}={v}" for k, v in value.items())
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name.upper()}={value}")
        return "\n".join(lines) + "\n"


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig from an optional KEY=VALUE file plus flag overrides.

    Args:
        path: Config file path (dotenv syntax); None for defaults only
        overrides: Values from command-line flags; None entries are ignored

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: Missing file, unknown key or invalid value
    """
    values: Dict[str, Any] = {}

    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"Config file not found: {path}")

        known = set(RunConfig.model_fields)
        for key, value in dotenv_values(config_path).items():
            name = key.strip().lower()
            if name not in known:
                raise ConfigError(f"Unknown config key '{key}' in {path}")
            if value is not None and value != "":
                values[name] = value

    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = value

    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
