"""Configuration: process settings via pydantic-settings and run hyperparameters."""

import json
import tomllib
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from cdl.constants import CONFIG_SCHEMA_VERSION, DEFAULT_SHARPNESS, DEFAULT_TOPK


class ConfigError(Exception):
    """Raised when a run configuration cannot be loaded or validated."""
    pass


class Settings(BaseSettings):
    """Process settings loaded from environment variables (prefix CDL_)."""

    # Logging
    log_level: str = "INFO"

    # Storage
    data_dir: str = "./data"
    runs_dir: str = "./runs"

    # Dataset download
    mnist_base_url: str = "https://ossci-datasets.s3.amazonaws.com/mnist/"
    verify_ssl: bool = True
    download_timeout: float = 60.0

    # HTTP/HTTPS Proxy (optional)
    proxy_url: Optional[str] = None

    model_config = SettingsConfigDict(
        env_prefix="CDL_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )


class TrainConfig(BaseModel):
    """Hyperparameters of one training run (mirrors the CLI flags one-to-one)."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    # Objective
    lam: float = Field(default=0.0, ge=0.0, alias="lambda")
    gamma: float = Field(default=0.0, ge=0.0)
    penalty_normalization: Literal["mean", "total"] = "mean"

    # Quantization
    mode: Literal["fp", "cdl", "rcdl"] = "rcdl"
    bits: int = Field(default=6, ge=1, le=8)
    exempt_first_last: bool = True
    activation_topk: Optional[int] = Field(default=DEFAULT_TOPK, ge=1)
    init_sharpness: float = Field(default=DEFAULT_SHARPNESS, gt=0.0)

    # Optimization
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr_w: float = Field(default=0.05, ge=0.0)
    lr_q: float = Field(default=0.05, ge=0.0)
    lr_s: float = Field(default=0.05, ge=0.0)
    lr_alpha: float = Field(default=0.05, ge=0.0)
    lr_beta: float = Field(default=0.05, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    lr_milestones: list[float] = Field(default_factory=lambda: [0.5, 0.75])
    lr_decay: float = Field(default=0.1, gt=0.0, le=1.0)
    seed: int = 1

    # Model and data
    model: Literal["mlp", "cnn", "tiny"] = "cnn"
    dataset: Literal["mnist", "synthetic"] = "mnist"
    train_subset: Optional[int] = Field(default=None, ge=1)
    test_subset: Optional[int] = Field(default=None, ge=1)
    synthetic_classes: int = Field(default=4, ge=2)
    synthetic_train: int = Field(default=512, ge=1)
    synthetic_test: int = Field(default=256, ge=1)
    synthetic_image_size: int = Field(default=8, ge=4)
    init_checkpoint: Optional[str] = None

    # Metrics
    measure_huffman: bool = True
    activation_batch_index: int = Field(default=0, ge=0)
    probe_batch_size: int = Field(default=128, ge=1)

    @field_validator("lr_milestones")
    @classmethod
    def _milestones_are_fractions(cls, value: list[float]) -> list[float]:
        for milestone in value:
            if not 0.0 < milestone < 1.0:
                raise ValueError(f"lr milestone {milestone} must lie in (0, 1)")
        return sorted(value)

    def dump(self) -> dict[str, Any]:
        """
        Serialize the config for metric logs and checkpoints.

        Returns:
            dict: Field values keyed by their public names plus schema_version
        """
        data = self.model_dump(by_alias=True)
        data["schema_version"] = CONFIG_SCHEMA_VERSION
        return data


def load_config_file(path: str | Path) -> dict[str, Any]:
    """
    Read a TOML or JSON config file into a plain dictionary.

    Args:
        path: Path to a .toml or .json file

    Returns:
        dict: Raw key/value pairs (not yet validated)

    Raises:
        ConfigError: If the file is missing, unparsable or of another major schema
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    try:
        if path.suffix == ".toml":
            with path.open("rb") as fh:
                data = tomllib.load(fh)
        else:
            data = json.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Failed to parse config {path}: {e}") from e

    # Flat [train] table or top-level keys are both accepted
    if "train" in data and isinstance(data["train"], dict):
        data = data["train"]

    version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if str(version).split(".")[0] != CONFIG_SCHEMA_VERSION.split(".")[0]:
        raise ConfigError(f"Unsupported config schema version {version}")

    return data


def build_config(file_values: Optional[dict[str, Any]] = None, **overrides: Any) -> TrainConfig:
    """
    Merge file values with explicit overrides and validate.

    Args:
        file_values: Values read by load_config_file (may be None)
        **overrides: Values that take precedence (None values are ignored)

    Returns:
        TrainConfig: Validated configuration

    Raises:
        ConfigError: If validation fails
    """
    merged: dict[str, Any] = dict(file_values or {})
    if "lambda" in merged:
        merged["lam"] = merged.pop("lambda")
    merged.update({key: value for key, value in overrides.items() if value is not None})

    try:
        return TrainConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


# Global settings instance
settings = Settings()
