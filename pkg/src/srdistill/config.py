"""Declarative run configuration: defaults < config file < overrides."""
from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "SRDISTILL_OUTPUT_ROOT"
RESOLVED_NAME = "resolved_config.yaml"

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "prepare": {"scale": 2, "size": 192, "stride": 96},
    "train": {"arch": "srcnn", "scale": 2, "steps": 2000, "batch_size": 16,
              "learning_rate": 1e-4, "optimizer": "adam", "patch_size": 96},
    "distill": {"iters": 1000, "ipc": 1, "synth_size": 96, "synth_lr": 0.1, "momentum": 0.5,
                "batch_real": 8, "patch_size": None, "net_update_steps": 0,
                "net_update_lr": 1e-4, "init": "downscale", "reference": "random",
                "checkpoint": None, "match_mode": "layerwise", "snapshot_every": 0},
    "latent": {"iters": 1000, "ipc": 1, "latent_dim": 64, "out_size": 64, "latent_lr": 1e-3,
               "batch_real": 8, "patch_size": None, "inversion_steps": 300,
               "inversion_lr": 1e-2, "tune_generator": True, "tune_steps": None,
               "tune_lr": 1e-3, "ae_pretrain_steps": 1000, "reference": "pretrained",
               "checkpoint": None, "generator": None, "snapshot_every": 0},
    "eval": {"scale": 2, "crop_border": 0, "y_only": False, "perceptual": None},
}


@dataclass
class RunConfig:
    subcommand: str | None
    config_file: str | None
    overrides: list[str]
    seed: int
    output_root: Path
    values: dict = field(default_factory=dict)

    def __getitem__(self, dotted: str):
        node = self.values
        for part in dotted.split("."):
            node = node[part]
        return node

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {"subcommand": self.subcommand, "config_file": self.config_file,
               "overrides": self.overrides, **self.values}
        path = out_dir / RESOLVED_NAME
        path.write_text(yaml.safe_dump(doc, sort_keys=False))
        return path


_SCI = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+")


def _scalar(val):
    # YAML 1.1 reads "1e-3" as a string; treat numeric-looking strings as floats
    if isinstance(val, str) and _SCI.fullmatch(val.strip()):
        return float(val)
    return val


def coerce_numbers(obj):
    """Recursively apply the scientific-notation fix to a loaded YAML document."""
    if isinstance(obj, dict):
        return {k: coerce_numbers(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [coerce_numbers(v) for v in obj]
    return _scalar(obj)


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, val in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{dotted}' must be a mapping")
            _merge(base[key], val, dotted + ".")
        else:
            base[key] = _scalar(val)


def apply_override(values: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    dotted, raw = item.split("=", 1)
    parts = dotted.strip().split(".")
    node = values
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{'.'.join(parts[:i + 1])}'")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigError(f"config key '{dotted}' is a section, not a value")
            node[part] = _scalar(yaml.safe_load(raw)) if raw.strip() else None
        else:
            node = node[part]


def resolve_config(file=None, overrides=(), subcommand: str | None = None,
                   seed: int | None = None, output_root=None) -> RunConfig:
    values = copy.deepcopy(DEFAULTS)
    if file is not None:
        try:
            loaded = yaml.safe_load(Path(file).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {file}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {file} must be a mapping")
        version = loaded.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version} unsupported "
                              f"(expected {SCHEMA_VERSION})")
        _merge(values, loaded)
    for item in overrides:
        apply_override(values, item)
    if seed is not None:
        values["seed"] = seed
    root = Path(output_root or os.environ.get(OUTPUT_ROOT_ENV) or ".")
    return RunConfig(subcommand, str(file) if file else None, list(overrides),
                     int(values["seed"]), root, values)
