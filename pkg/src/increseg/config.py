"""Config-driven experiments: file schema, defaults, profiles, round-trip.

A config file (TOML or JSON) declares the strategy, the stage manifests, the
schedule DSL, optimizer and network knobs, tiling/augmentation profiles,
rehearsal fractions, and seeds. The effective config (after defaults) is
dumped next to the outputs so a run can be reproduced from the dump alone.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .trainer import STRATEGIES, parse_schedule

TILING_PROFILES = {
    # (train patch, train overlap, inference patch, inference overlap)
    "luxcarta": (384, 32, 2240, 64),
    "benchmark": (512, 64, 2000, 120),
}

class ConfigError(ValueError):
    """Experiment config file is malformed or inconsistent."""


@dataclass
class ExperimentConfig:
    strategy: str = "incremental"
    stages: list[str] = field(default_factory=list)
    output_dir: str = "runs/experiment"
    seed: int = 0
    desk_scale: bool = False
    schedule_cycles: list[str] = field(default_factory=list)  # DSL per stage
    epochs: int = 500
    iters_per_epoch: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 12
    width_scale: float = 1.0
    in_channels: int = 3
    patch_size: int = 384
    patch_overlap: int = 32
    infer_patch_size: int = 2240
    infer_overlap: int = 64
    augment_profile: str = "luxcarta"
    augment_enabled: bool = True
    augment_rehearsal: bool = True
    frac_importance: float = 0.15
    frac_random: float = 0.15
    eval_every: int = 0
    val_manifests: list[str] = field(default_factory=list)
    erode_radius: int = 0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.stages:
            raise ConfigError("config lists no stage manifests")
        for dsl in self.schedule_cycles:
            if dsl:
                try:
                    parse_schedule(dsl)  # rem targets checked at run time
                except ValueError as e:
                    raise ConfigError(str(e)) from e
        if self.val_manifests and len(self.val_manifests) not in (
                1, len(self.stages)):
            raise ConfigError("val_manifests must list one manifest or one "
                              "per stage")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _read_raw(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, "rb") as f:
        if path.suffix == ".toml":
            try:
                return tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from e
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build the effective config: base defaults, then profile and desk-scale
    defaults, then explicit keys."""
    cfg = ExperimentConfig()
    flat: dict = {}

    def take(section: dict, mapping: dict[str, str]):
        for key, attr in mapping.items():
            if key in section:
                flat[attr] = section[key]

    take(raw, {"strategy": "strategy", "stages": "stages",
               "output_dir": "output_dir", "seed": "seed",
               "desk_scale": "desk_scale"})
    sched = raw.get("schedule", {})
    take(sched, {"cycles": "schedule_cycles", "epochs": "epochs",
                 "iters_per_epoch": "iters_per_epoch"})
    take(raw.get("optimizer", {}),
         {"lr": "lr", "beta1": "beta1", "beta2": "beta2", "eps": "eps",
          "batch_size": "batch_size"})
    take(raw.get("network", {}),
         {"width_scale": "width_scale", "in_channels": "in_channels"})
    tiling = dict(raw.get("tiling", {}))
    if "profile" in tiling:
        profile = tiling.pop("profile")
        if profile not in TILING_PROFILES:
            raise ConfigError(f"unknown tiling profile {profile!r}")
        ps, ov, ips, iov = TILING_PROFILES[profile]
        flat.update(patch_size=ps, patch_overlap=ov,
                    infer_patch_size=ips, infer_overlap=iov)
    take(tiling, {"patch_size": "patch_size", "overlap": "patch_overlap",
                  "infer_patch_size": "infer_patch_size",
                  "infer_overlap": "infer_overlap"})
    take(raw.get("augment", {}),
         {"profile": "augment_profile", "enabled": "augment_enabled",
          "rehearsal": "augment_rehearsal"})
    take(raw.get("rehearsal", {}),
         {"frac_importance": "frac_importance", "frac_random": "frac_random"})
    take(raw.get("eval", {}),
         {"every": "eval_every", "val_manifests": "val_manifests",
          "erode_radius": "erode_radius"})

    if flat.get("desk_scale", False):
        desk = {
            "width_scale": 0.125,
            "patch_size": 64, "patch_overlap": 0,
            "infer_patch_size": 64, "infer_overlap": 0,
            "epochs": 20, "iters_per_epoch": 50,
            "batch_size": 8,
        }
        # explicit keys win over desk-scale defaults
        desk.update(flat)
        flat = desk

    unknown = set(flat) - set(cfg.__dict__)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for attr, value in flat.items():
        setattr(cfg, attr, value)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    raw = _read_raw(path)
    try:
        return config_from_dict(raw)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def dump_effective_config(cfg: ExperimentConfig, path):
    """Write the post-defaults config; loading the dump reproduces the run."""
    d = cfg.to_dict()
    d["_effective"] = True
    with open(path, "w") as f:
        json.dump(d, f, indent=2, sort_keys=True)


def load_effective_config(path) -> ExperimentConfig:
    with open(path) as f:
        raw = json.load(f)
    raw.pop("_effective", None)
    cfg = ExperimentConfig()
    unknown = set(raw) - set(cfg.__dict__)
    if unknown:
        raise ConfigError(f"unknown keys in effective config: {sorted(unknown)}")
    for attr, value in raw.items():
        setattr(cfg, attr, value)
    return cfg.validate()
