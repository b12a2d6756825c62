"""Run configuration: defaults, YAML loading, overrides, validation.

The config is a nested key/value tree with ``model``, ``loss``,
``tracker``, and ``train`` sections plus a root ``seed``. Files may set
any subset; unknown keys are rejected. Flag overrides win over file
values. The effective config is echoed into every output directory for
provenance.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import yaml

from .loss import LossWeights
from .model import ModelConfig
from .tracker import TrackerConfig
from .train import TrainConfig

DATA_ROOT_ENV = "HSTRACK_DATA_ROOT"


class ConfigError(ValueError):
    """Configuration file or override is invalid."""


def default_config() -> dict:
    return {
        "seed": 0,
        "model": {
            "channels": 48,
            "stage_widths": [24, 48],
            "heads": 8,
            "ffn_dim": None,
            "fusion": "union",
            "share_fusion_context": True,
        },
        "loss": {
            "lambda_reg": 2.0,
            "lambda_spec": 1.0,
            "spectral_reduce": "sum",
        },
        "tracker": {
            "template_size": 48,
            "search_size": 96,
            "template_context": 2.0,
            "search_context": 4.0,
            "window_weight": 0.3,
            "eta": 0.7,
        },
        "train": {
            "lr_backbone": 1.0e-5,
            "lr_other": 1.0e-4,
            "weight_decay": 1.0e-4,
            "batch_size": 16,
            "epochs": 200,
            "iters_per_epoch": 1000,
            "lr_drop_epoch": 50,
            "freeze_spatial": False,
            "max_pair_gap": 30,
            "augment_flip": True,
            "augment_rotate": True,
            "augment_crop": True,
            "rotate_max_deg": 15.0,
            "crop_scale_range": [0.8, 1.0],
            "normalize": True,
            "deterministic": True,
        },
    }


# desk-scale schedule that finishes in minutes on a workstation
PRESETS = {
    "toy": {
        "train": {
            "lr_backbone": 1.0e-4,
            "lr_other": 1.0e-3,
            "batch_size": 8,
            "epochs": 8,
            "iters_per_epoch": 60,
            "lr_drop_epoch": 6,
        },
    },
    # fine-tuning: learning rates at one tenth, everything else unchanged
    "finetune": {
        "train": {
            "lr_backbone": 1.0e-6,
            "lr_other": 1.0e-5,
        },
    },
}


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a section")
            _merge(base[key], value, here)
        else:
            base[key] = value


def load_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict | None = None,
) -> dict:
    """Defaults, then preset, then file, then explicit overrides."""
    cfg = default_config()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _merge(cfg, copy.deepcopy(PRESETS[preset]))
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}")
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        _merge(cfg, raw)
    if overrides:
        _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    """Instantiate every section so dataclass invariants run."""
    try:
        model_config(cfg)
        tracker_config(cfg)
        train_config(cfg)
        loss_weights(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        channels=int(m["channels"]),
        stage_widths=tuple(int(w) for w in m["stage_widths"]),
        heads=int(m["heads"]),
        ffn_dim=None if m["ffn_dim"] is None else int(m["ffn_dim"]),
        fusion=m["fusion"],
        share_fusion_context=bool(m["share_fusion_context"]),
        seed=int(cfg["seed"]),
    )


def tracker_config(cfg: dict) -> TrackerConfig:
    t = cfg["tracker"]
    return TrackerConfig(
        template_size=int(t["template_size"]),
        search_size=int(t["search_size"]),
        template_context=float(t["template_context"]),
        search_context=float(t["search_context"]),
        window_weight=float(t["window_weight"]),
        eta=float(t["eta"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr_backbone=float(t["lr_backbone"]),
        lr_other=float(t["lr_other"]),
        weight_decay=float(t["weight_decay"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        iters_per_epoch=int(t["iters_per_epoch"]),
        lr_drop_epoch=int(t["lr_drop_epoch"]),
        freeze_spatial=bool(t["freeze_spatial"]),
        max_pair_gap=int(t["max_pair_gap"]),
        augment_flip=bool(t["augment_flip"]),
        augment_rotate=bool(t["augment_rotate"]),
        augment_crop=bool(t["augment_crop"]),
        rotate_max_deg=float(t["rotate_max_deg"]),
        crop_scale_range=tuple(float(v) for v in t["crop_scale_range"]),
        normalize=bool(t["normalize"]),
        spectral_reduce=cfg["loss"]["spectral_reduce"],
        seed=int(cfg["seed"]),
        deterministic=bool(t["deterministic"]),
    )


def loss_weights(cfg: dict) -> LossWeights:
    l = cfg["loss"]
    return LossWeights(lambda_reg=float(l["lambda_reg"]), lambda_spec=float(l["lambda_spec"]))


def data_root(explicit: str | None = None) -> Path:
    """Explicit path, else the data-root environment variable, else cwd."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else Path.cwd()


def echo_config(cfg: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


def config_fingerprint(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True)
