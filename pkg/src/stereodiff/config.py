"""Layered run configuration.

A config is a nested dict of plain scalars/lists addressed by dotted keys
(``diffusion.T``, ``tascata.tau``, ...).  Resolution order: built-in defaults,
then an optional preset, then a YAML file, then explicit ``key=value``
overrides.  Every documented key has a default here so a bare ``Config()`` is
always runnable.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Iterable

import yaml

# Defaults target the "desk" scale: 64x64 HR patches, a small latent UNet and
# a 200-pair synthetic dataset.  The "paper-scale" preset preserves the
# settings reported for the full-size system and is not meant to be run here.
_DEFAULTS: dict[str, Any] = {
    "diffusion": {
        "T": 1000,
        "beta_min": 1e-4,
        "beta_max": 0.02,
        "infer_steps": 50,
        "shared_noise": True,
    },
    "tascata": {
        "enabled": True,
        "tau": 1.0,
        "insertion_levels": [1, 2],
    },
    "unet": {
        "base_channels": 64,
        "channel_mults": [1, 2, 4],
        "attn_levels": [1, 2],
        "time_dim": 64,
        "latent_channels": 4,
        "context_dim": 64,
    },
    "codec": {
        "factor": 4,
        "latent_channels": 4,
        "bypass": False,
        "epochs": 60,
        "lr": 2e-3,
        "batch_size": 16,
    },
    "sse": {
        "threshold": 0.68,
        "tag_merge_enabled": True,
        "input_size": 16,
        "token_dim": 64,
        "epochs": 40,
        "lr": 2e-3,
        "batch_size": 16,
    },
    "soan": {
        "width": 32,
        "groups": 2,
        "window": 4,
        "scale": 4,
        "epochs": 30,
        "lr": 1e-3,
        "batch_size": 8,
        "adv_weight": 0.01,
    },
    "controlnet": {
        "mode": "soa",  # none | plain | soa
    },
    "degradation": {
        "blur_sigma": [0.4, 2.0],
        "aniso_prob": 0.3,
        "resize_scale": [0.6, 1.2],
        "noise_sigma": [0.0, 0.05],
        "compress_quality": [35, 90],
        "second_stage_prob": 0.8,
        "second_blur_sigma": [0.2, 1.0],
        "second_resize_scale": [0.8, 1.2],
        "second_noise_sigma": [0.0, 0.03],
        "per_view_noise": True,
        "out_factor": 4,
    },
    "data": {
        "hr_size": 64,
        "train_pairs": 200,
        "val_pairs": 16,
        "min_objects": 2,
        "max_objects": 4,
        "min_disp": 2,
        "max_disp": 8,
        "speckle_amp": 0.05,
    },
    "metrics": {
        "block": 9,
        "max_disp": 32,
        "ssim_window": 8,
        "ssim_k1": 0.01,
        "ssim_k2": 0.03,
        "psnr_cap": 100.0,
    },
    "pipeline": {
        "batch_size": 8,
        "lr": 5e-5,
        "epochs": 10,
        "seed": 0,
        "adam_betas": [0.9, 0.999],
        "checkpoint_every": 5,
        "train_base": True,
        "train_soan_ckpt": "",
        "infer_soan_ckpt": "",
    },
}

# Named presets are shallow bundles of dotted-key overrides.
_PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    # Reduced preset for CPU-only runs of the ablation suite.
    "reduced": {
        "diffusion.T": 200,
        "diffusion.infer_steps": 10,
        "unet.base_channels": 32,
        "unet.channel_mults": [1, 2],
        "unet.attn_levels": [1],
        "tascata.insertion_levels": [1],
        "data.hr_size": 48,
        "data.train_pairs": 48,
        "data.val_pairs": 8,
        "codec.epochs": 40,
        "sse.epochs": 25,
        "soan.epochs": 20,
        "pipeline.epochs": 6,
        "pipeline.lr": 2e-4,
        "pipeline.checkpoint_every": 3,
    },
    # Settings reported for the full-size system; kept as a named record,
    # far beyond desk-scale compute.
    "paper-scale": {
        "data.hr_size": 512,
        "pipeline.batch_size": 32,
        "pipeline.lr": 5e-5,
        "pipeline.epochs": 100,
        "diffusion.T": 1000,
        "diffusion.infer_steps": 50,
    },
}


class ConfigError(ValueError):
    """Raised for unknown keys or malformed override values."""


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_scalar(text: str) -> Any:
    """Parse an override value string: JSON first, then YAML-ish fallbacks."""
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return text


class Config:
    """Nested key-value configuration with dotted-path access."""

    def __init__(self, data: dict[str, Any] | None = None):
        self._data = _deep_merge(_DEFAULTS, data or {})

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        preset: str | None = None,
        overrides: Iterable[str] = (),
    ) -> "Config":
        cfg = cls()
        if preset:
            if preset not in _PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; have {sorted(_PRESETS)}")
            for key, value in _PRESETS[preset].items():
                cfg.set(key, value)
        if path is not None:
            with Path(path).open("r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {path} must hold a mapping")
            cfg._data = _deep_merge(cfg._data, loaded)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, _, value = item.partition("=")
            cfg.set(key.strip(), _parse_scalar(value.strip()))
        return cfg

    def get(self, key: str, default: Any = ...) -> Any:
        node: Any = self._data
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is ...:
                    raise ConfigError(f"unknown config key {key!r}")
                return default
            node = node[part]
        return node

    def set(self, key: str, value: Any) -> None:
        parts = key.split(".")
        node = self._data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key!r}: {part!r} is a leaf")
        node[parts[-1]] = value

    def section(self, name: str) -> dict[str, Any]:
        value = self.get(name)
        if not isinstance(value, dict):
            raise ConfigError(f"{name!r} is not a section")
        return copy.deepcopy(value)

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self._data)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            yaml.safe_dump(self._data, f, sort_keys=True)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Config({self._data!r})"


def preset_names() -> list[str]:
    return sorted(_PRESETS)
