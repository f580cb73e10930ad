import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional
import logging

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings

from exceptions import ConfigurationError
from models import (
    AttackKind, DataSection, EvalSection, ModelSection, RunConfig,
    SyntheticSection, TrainConfig, default_attack_battery,
)

logger = logging.getLogger(__name__)

TOOL_NAME = "protoshield"
TOOL_VERSION = "0.1.0"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


class Settings(BaseSettings):
    """Process-wide settings"""

    tool_version: str = TOOL_VERSION

    # Output
    output_root: str = "runs"
    plots: bool = True

    # Logging
    log_level: str = "INFO"

    # Evaluation
    eval_workers: int = 1

    # Result cache - in-memory unless a Redis URL is configured
    redis_url: Optional[str] = None
    cache_prefix: str = "pshield"
    cache_ttl: int = 86400

    # Data
    mnist_dir: Optional[str] = None

    class Config:
        env_prefix = "PROTOSHIELD_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False


@lru_cache()
def get_settings() -> Settings:
    """Settings read once from the environment and .env"""
    return Settings()


def clear_settings_cache() -> None:
    get_settings.cache_clear()
    logger.debug("Settings will be re-read from the environment")


def ensure_output_root() -> Path:
    """Ensure the output root directory exists"""
    root = Path(get_settings().output_root)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()))
        parts.append(f"{loc}: {err.get('msg')}" if loc else str(err.get("msg")))
    return "; ".join(parts)


def validate_run_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping, turning pydantic errors into field-level configuration errors"""
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration: {_format_validation_error(e)}",
                                 details={"errors": [
                                     {"field": ".".join(str(p) for p in err.get("loc", ())), "message": err.get("msg")}
                                     for err in e.errors()
                                 ]})


def load_run_config(path: str) -> Dict[str, Any]:
    """Read a YAML run configuration into a raw mapping"""
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}", details={"field": "config", "path": path})
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config file {path} is not valid YAML: {e}", details={"path": path})
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must contain a mapping", details={"path": path})
    return raw


def apply_overrides(raw: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Merge dotted-key overrides (e.g. 'train.epochs') into a raw mapping; flags win"""
    merged = yaml.safe_load(yaml.safe_dump(raw)) if raw else {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = merged
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    return merged


def profile_run_config(profile: str) -> Dict[str, Any]:
    """Raw configuration of a named reproduction profile"""
    if profile == "tiny":
        config = RunConfig(
            model=ModelSection(profile="tiny", num_classes=4, input_shape=[1, 16, 16]),
            data=DataSection(
                source="synthetic",
                synthetic=SyntheticSection(num_classes=4, n_per_class=48, eval_per_class=16,
                                           image_shape=[1, 16, 16], spread=0.15),
            ),
            train=TrainConfig(epochs=6, warmup_epochs=2, batch_size=32, lr=0.05, lr_decay_epochs=[5]),
            attacks=default_attack_battery(epsilon=0.3, c=10.0, cw_iters=50),
            eval=EvalSection(batch_size=64, sweep_grid=[0.0, 0.1, 0.2, 0.3, 0.6],
                             probe_draws=100, probe_samples=32),
        )
        return config.model_dump(mode="json")
    if profile == "desk":
        mnist_dir = get_settings().mnist_dir
        if not mnist_dir:
            raise ConfigurationError("desk profile needs PROTOSHIELD_MNIST_DIR (field: mnist_dir)",
                                     details={"field": "mnist_dir"})
        paths = {name: str(Path(mnist_dir) / filename) for name, filename in MNIST_FILES.items()}
        config = RunConfig(
            model=ModelSection(profile="desk", num_classes=10, input_shape=[1, 28, 28]),
            data=DataSection(source="idx", train_size=10000, eval_size=1000, **paths),
            train=TrainConfig(epochs=30, warmup_epochs=5, batch_size=256, lr=0.1, lr_decay_epochs=[20, 25]),
            attacks=default_attack_battery(epsilon=0.3, c=10.0, cw_iters=1000),
            eval=EvalSection(sweep_kinds=[AttackKind.FGSM, AttackKind.BIM, AttackKind.MIM, AttackKind.PGD]),
        )
        return config.model_dump(mode="json")
    raise ConfigurationError(f"unknown profile '{profile}' (expected tiny or desk)", details={"field": "profile"})
