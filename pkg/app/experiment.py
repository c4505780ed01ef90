"""Experiment configuration document (YAML) mapped onto the module configs."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from app.datapipe import AugmentConfig, RebalanceConfig
from app.errors import ConfigError, InvalidArgumentError
from app.synthfundus import TaskId, TaskSpec
from app.sweep import SweepConfig
from app.trainer import InitMode, TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "runs/default"

_FUNDUS_KEYS = ("image_size", "positive_count", "negative_count", "shared_feature_strength", "noise_std", "seed")
_PRETEXT_KEYS = ("image_size", "num_classes", "per_class_count", "noise_std", "seed")
_TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "momentum")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run directory is built from."""

    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = DEFAULT_OUT_DIR

    def with_out_dir(self, out_dir: Union[str, Path]) -> "ExperimentConfig":
        return replace(self, out_dir=str(out_dir))

    def with_seed_override(self, first_seed: int) -> "ExperimentConfig":
        """Replace the seed list with first_seed, first_seed + 1, ... of the same length."""
        seeds = tuple(first_seed + i for i in range(len(self.sweep.seeds)))
        try:
            return replace(self, sweep=replace(self.sweep, seeds=seeds))
        except InvalidArgumentError as e:
            raise ConfigError(f"--seed-override {first_seed}: {e}") from e


def default_experiment_config() -> ExperimentConfig:
    return ExperimentConfig()


def _task_to_dict(spec: TaskSpec) -> Dict[str, Any]:
    keys = _FUNDUS_KEYS if spec.task_id.is_binary else _PRETEXT_KEYS
    return {key: getattr(spec, key) for key in keys}


def _train_to_dict(config: TrainConfig) -> Dict[str, Any]:
    data = {key: getattr(config, key) for key in _TRAIN_KEYS}
    data["rebalance"] = {
        "r": config.rebalance.r,
        "enabled": config.rebalance.enabled,
        "minority_label": config.rebalance.minority_label,
    }
    return data


def experiment_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    sweep = config.sweep
    augment = sweep.finetune.augment
    return {
        "out_dir": config.out_dir,
        "data": {
            "train_ratio": sweep.train_ratio,
            "split_seed": sweep.split_seed,
            "source_dr": _task_to_dict(sweep.source),
            "target_rop": _task_to_dict(sweep.target),
            "generic_pretext": _task_to_dict(sweep.pretext),
        },
        "augment": {
            "brightness_range": list(augment.brightness_range),
            "flip_probability": augment.flip_probability,
            "output_size": augment.output_size,
        },
        "pretrain": _train_to_dict(sweep.pretrain),
        "finetune": _train_to_dict(sweep.finetune),
        "sweep": {
            "modes": [mode.value for mode in sweep.modes],
            "fractions": list(sweep.fractions),
            "seeds": list(sweep.seeds),
        },
    }


def _merge(defaults: Dict[str, Any], overrides: Any, path: str) -> Dict[str, Any]:
    """Overlay overrides onto defaults, rejecting unknown keys at any depth."""
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(overrides).__name__}")
    merged = dict(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, where)
        else:
            merged[key] = value
    return merged


def _build_train(section: Dict[str, Any], augment: AugmentConfig) -> TrainConfig:
    rebalance = RebalanceConfig(**section["rebalance"])
    return TrainConfig(
        **{key: section[key] for key in _TRAIN_KEYS},
        rebalance=rebalance,
        augment=augment,
    )


def parse_experiment_config(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a parsed document; missing keys take defaults."""
    merged = _merge(experiment_to_dict(default_experiment_config()), data or {}, "")
    try:
        tasks = merged["data"]
        augment = AugmentConfig(**merged["augment"])
        sweep = SweepConfig(
            source=TaskSpec(TaskId.SOURCE_DR, **tasks["source_dr"]),
            target=TaskSpec(TaskId.TARGET_ROP, **tasks["target_rop"]),
            pretext=TaskSpec(TaskId.GENERIC_PRETEXT, **tasks["generic_pretext"]),
            pretrain=_build_train(merged["pretrain"], augment),
            finetune=_build_train(merged["finetune"], augment),
            modes=tuple(InitMode(m) for m in merged["sweep"]["modes"]),
            fractions=tuple(merged["sweep"]["fractions"]),
            seeds=tuple(merged["sweep"]["seeds"]),
            train_ratio=tasks["train_ratio"],
            split_seed=tasks["split_seed"],
        )
    except (InvalidArgumentError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid experiment config: {e}") from e
    return ExperimentConfig(sweep=sweep, out_dir=str(merged["out_dir"]))


def load_experiment_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    """Read a YAML config; None means the built-in defaults."""
    if path is None:
        return default_experiment_config()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    config = parse_experiment_config(data)
    logger.info(f"Loaded experiment config from {path}")
    return config


def dump_experiment_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(experiment_to_dict(config), sort_keys=False, default_flow_style=None)
