"""Experiment configuration: a sectioned TOML file plus command-line overrides.

Every sub-seed is derived from the master seed and a stage name, so one
number reproduces the whole experiment. The config hash covers the resolved
settings (after overrides) and tags every CSV row.
"""

import copy
import hashlib
import json
import sys
import zlib
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "data": {"kind": "synthetic", "images": "", "labels": "", "batches": [], "n": 400, "classes": 2,
             "image_size": 12, "channels": 1, "snr": 4.0, "n_train": 300, "n_test": 100},
    "rbf": {"bank": "", "patch_size": 3, "threshold": -3.0, "max_epochs": 20, "max_images": 500,
            "max_patches": 50000, "target_count": 24, "calibration_epochs": 3, "calibration_iters": 20},
    "recon": {"beta1": 25.0, "beta2": 1.75, "m": 10, "sample_sharing": "per_patch"},
    "cnn": {"conv_channels": [16, 32], "kernel": 3},
    "train": {"checkpoint": "", "defended": True, "regime": "rcnn_plus", "epochs": 5, "batch_size": 50, "lr": 0.05,
              "lr_decay": 1.0, "momentum": 0.9, "label_smoothing": 0.1, "noise_std": 0.35, "noise_clip": 0.3,
              "harvest_epoch": -1, "harvest_eps": 0.3, "harvest_steps": 10},
    "attack": {"names": ["pgd"], "norm": "inf", "epsilon": 0.1, "steps": 40, "step_size": 0.0, "n_images": 100,
               "eot_samples": 50, "spsa_samples": 128, "spsa_lr": 0.01, "dump_images": 4},
    "smoothing": {"tau": 0.2, "n_samples": 1000, "alpha": 0.001, "n0": 100, "n_images": 20,
                  "radii": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]},
    "sweep": {"beta2": [0.0, 1.0, 1.75]},
    "bounds": {"n_trials": 10000, "dim": 25, "delta_max": [0.05, 0.1, 0.3], "contraction_eps": 0.05,
               "contraction_images": 100},
    "images": {"ids": [0]},
}


class ConfigError(ValueError):
    pass


def _merge(base, extra, where=""):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a section")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def parse_override(text):
    """``section.key=value`` to a nested dict; the value is read as TOML when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    node = {}
    parts = key.strip().split(".")
    cur = node
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


class ExperimentConfig:
    def __init__(self, values, base_dir=Path(".")):
        self.values = values
        self.base_dir = Path(base_dir)

    @classmethod
    def load(cls, path=None, overrides=(), seed=None):
        values = copy.deepcopy(DEFAULTS)
        base = Path(".")
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist")
            try:
                values = _merge(values, tomllib.loads(path.read_text()))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            base = path.parent
        for text in overrides:
            values = _merge(values, parse_override(text))
        if seed is not None:
            values["seed"] = int(seed)
        return cls(values, base)

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return int(self.values["seed"])

    def path(self, value):
        """Resolve a path setting relative to the config file."""
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require(self, section, key, what):
        p = self.path(self.values[section][key])
        if p is None or not (p.exists() or p.with_suffix(".json").exists()):
            raise ConfigError(f"{what} not found: set {section}.{key} (got {self.values[section][key]!r})")
        return p

    def sub_seed(self, stage):
        """Stable per-stage seed derived from the master seed."""
        return int(np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())]).generate_state(1)[0])

    def hash(self):
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]
