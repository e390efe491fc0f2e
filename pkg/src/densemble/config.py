"""Declarative run configuration: one JSON file drives every command.

User files are merged over the defaults below; unknown keys are
rejected with their dotted path, every seed is explicit in the resolved
config, and each command writes the fully resolved config into its run
manifest so any artifact can be reproduced from the manifest alone.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .attacks import DEFAULT_SAP_KERNELS
from .decorrelation import DecorConfig
from .ensemble import AdamConfig, TrainConfig
from .model import ArchConfig
from .signals import SynthConfig

__all__ = [
    "ConfigError",
    "DEFAULT_CONFIG",
    "load_config",
    "resolve_config",
    "resolve_root",
    "arch_from_config",
    "synth_from_config",
    "train_from_config",
    "decor_from_config",
]

OUTPUT_ROOT_ENV = "DENSEMBLE_ROOT"


class ConfigError(ValueError):
    """Invalid or unknown configuration content; exit code 2 at the CLI."""


DEFAULT_CONFIG: dict = {
    "data": {
        "source": "synthetic",
        "dir": "data",
        "manifest": None,
        "num_classes": 3,
        "records_per_class": 50,
        "length": 512,
        "sample_rate_hz": 128.0,
        "train_fraction": 0.9,
        "seeds": {"synth": 101, "split": 202},
    },
    "arch": {
        "conv_blocks": [[8, 7, 2], [16, 7, 2], [32, 5, 2]],
        "feature_dim": 64,
    },
    "train": {
        "epochs": 60,
        "batch_size": 80,
        "learning_rate": 1e-3,
        "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "seeds": {"init": 303, "shuffle": 404},
    },
    "decor": {
        "projection_dim": 50,
        "weight": 0.2,
        "stab_eps": 1e-5,
        "seed": 505,
    },
    "bank": {"cutoff": 0.2, "transition_width": 0.05},
    "attack": {
        "families": ["pgd", "sap"],
        "epsilons": [0.1, 0.25, 0.5, 1.0, 1.5],
        "steps": 20,
        "alpha_scale": 0.1,
        "sap_kernels": [list(k) for k in DEFAULT_SAP_KERNELS],
    },
    "output": {"root": "."},
}


def _merge(defaults: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected a section (object)")
            out[key] = _merge(defaults[key], value, dotted)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cfg: dict, dotted: str, kinds, pred=None, what: str = "") -> None:
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    if not isinstance(node, kinds) or isinstance(node, bool):
        raise ConfigError(f"{dotted}: expected {what or kinds}")
    if pred is not None and not pred(node):
        raise ConfigError(f"{dotted}: invalid value {node!r}" + (f" ({what})" if what else ""))


def _validate(cfg: dict) -> None:
    num = (int, float)
    _require(cfg, "data.source", str, lambda v: v in ("synthetic", "manifest"),
             "one of 'synthetic'|'manifest'")
    _require(cfg, "data.dir", str, lambda v: len(v) > 0, "non-empty path")
    if cfg["data"]["source"] == "manifest" and not isinstance(cfg["data"]["manifest"], str):
        raise ConfigError("data.manifest: required when data.source is 'manifest'")
    _require(cfg, "data.num_classes", int, lambda v: v in (2, 3, 4), "2, 3 or 4")
    _require(cfg, "data.records_per_class", int, lambda v: v >= 2, ">= 2")
    _require(cfg, "data.length", int, lambda v: v >= 16, ">= 16")
    _require(cfg, "data.sample_rate_hz", num, lambda v: v > 0, "> 0")
    _require(cfg, "data.train_fraction", num, lambda v: 0 < v < 1, "in (0, 1)")
    _require(cfg, "data.seeds.synth", int)
    _require(cfg, "data.seeds.split", int)

    blocks = cfg["arch"]["conv_blocks"]
    if (
        not isinstance(blocks, list)
        or not blocks
        or any(
            not isinstance(b, list)
            or len(b) != 3
            or any(not isinstance(v, int) or v < 1 for v in b)
            for b in blocks
        )
    ):
        raise ConfigError("arch.conv_blocks: expected a list of [channels, kernel, stride]")
    _require(cfg, "arch.feature_dim", int, lambda v: v >= 1, ">= 1")

    _require(cfg, "train.epochs", int, lambda v: v >= 1, ">= 1")
    _require(cfg, "train.batch_size", int, lambda v: v >= 2, ">= 2")
    _require(cfg, "train.learning_rate", num, lambda v: v > 0, "> 0")
    _require(cfg, "train.adam.beta1", num, lambda v: 0 <= v < 1, "in [0, 1)")
    _require(cfg, "train.adam.beta2", num, lambda v: 0 <= v < 1, "in [0, 1)")
    _require(cfg, "train.adam.eps", num, lambda v: v > 0, "> 0")
    _require(cfg, "train.seeds.init", int)
    _require(cfg, "train.seeds.shuffle", int)

    _require(cfg, "decor.projection_dim", int, lambda v: v >= 1, ">= 1")
    if cfg["decor"]["projection_dim"] > cfg["arch"]["feature_dim"]:
        raise ConfigError("decor.projection_dim: must not exceed arch.feature_dim")
    _require(cfg, "decor.weight", num, lambda v: v >= 0, ">= 0")
    _require(cfg, "decor.stab_eps", num, lambda v: v > 0, "> 0")
    _require(cfg, "decor.seed", int)

    _require(cfg, "bank.cutoff", num, lambda v: 0 < v < 0.5, "in (0, 0.5)")
    _require(cfg, "bank.transition_width", num, lambda v: v >= 0, ">= 0")

    fams = cfg["attack"]["families"]
    if not isinstance(fams, list) or not fams or any(f not in ("pgd", "sap") for f in fams):
        raise ConfigError("attack.families: expected a non-empty list of 'pgd'|'sap'")
    eps = cfg["attack"]["epsilons"]
    if (
        not isinstance(eps, list)
        or not eps
        or any(isinstance(e, bool) or not isinstance(e, (int, float)) or e < 0 for e in eps)
    ):
        raise ConfigError("attack.epsilons: expected a non-empty list of numbers >= 0")
    _require(cfg, "attack.steps", int, lambda v: v >= 1, ">= 1")
    _require(cfg, "attack.alpha_scale", num, lambda v: v > 0, "> 0")
    kernels = cfg["attack"]["sap_kernels"]
    if (
        not isinstance(kernels, list)
        or not kernels
        or any(
            not isinstance(k, list) or len(k) != 2
            or not isinstance(k[0], int) or k[0] < 1 or k[0] % 2 == 0
            or not isinstance(k[1], (int, float)) or k[1] <= 0
            for k in kernels
        )
    ):
        raise ConfigError("attack.sap_kernels: expected [odd_width, std>0] pairs")
    _require(cfg, "output.root", str, lambda v: len(v) > 0, "non-empty path")


def resolve_config(user: dict) -> dict:
    cfg = _merge(DEFAULT_CONFIG, user, "")
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(user)


def resolve_root(cfg: dict) -> Path:
    """Output root: environment override, then config, then cwd."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, cfg["output"]["root"]))


def resolve_path(cfg: dict, p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else resolve_root(cfg) / p


def arch_from_config(cfg: dict) -> ArchConfig:
    return ArchConfig(
        conv_blocks=tuple(tuple(b) for b in cfg["arch"]["conv_blocks"]),
        feature_dim=cfg["arch"]["feature_dim"],
        num_classes=cfg["data"]["num_classes"],
        input_length=cfg["data"]["length"],
    )


def synth_from_config(cfg: dict) -> SynthConfig:
    d = cfg["data"]
    return SynthConfig(
        num_classes=d["num_classes"],
        records_per_class=d["records_per_class"],
        length=d["length"],
        sample_rate_hz=d["sample_rate_hz"],
    )


def train_from_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        adam=AdamConfig(t["adam"]["beta1"], t["adam"]["beta2"], t["adam"]["eps"]),
        init_seed=t["seeds"]["init"],
        shuffle_seed=t["seeds"]["shuffle"],
    )


def decor_from_config(cfg: dict) -> DecorConfig:
    d = cfg["decor"]
    return DecorConfig(
        projection_dim=d["projection_dim"],
        weight=d["weight"],
        stab_eps=d["stab_eps"],
        seed=d["seed"],
    )
