"""Pipeline configuration: JSON file sections, strict keys, range checks."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .hgfc import CLUSTER, INSTANCE
from .layers import ENCODER_INITS, IDENTITY
from .stage2 import Stage2Config
from .synthgen import SynthConfig
from .vaab import Stage1Config


@dataclass
class PathsSection:
    data_dir: str = "data"
    out_dir: str = "out"


@dataclass
class DBSCANSection:
    eps: float = 0.2
    min_samples: int = 4
    satellite_min_samples: int = 1


@dataclass
class StageSection:
    epochs: int = 5
    lr: float = 1e-3
    batch: int = 24


@dataclass
class HGFCSection:
    k: int = 2
    consist_threshold: float = 0.5
    vote_mode: str = CLUSTER


@dataclass
class ModelSection:
    dim_out: int = 64
    disc_hidden: int = 32
    head_dim: int = 64
    encoder_init: str = IDENTITY


@dataclass
class SynthSection:
    num_classes: int = 40
    drones_per_class: int = 8
    sats_per_class: int = 1
    dim: int = 64
    gap_strength: float = 2.0
    noise_sigma: float = 0.05
    emit_images: bool = False


@dataclass
class PipelineConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    dbscan: DBSCANSection = field(default_factory=DBSCANSection)
    temperature: float = 0.05
    lam: float = 0.1
    memory_momentum: float = 0.2
    # plain gradient descent at desk scale needs larger steps than 1e-3
    stage1: StageSection = field(default_factory=lambda: StageSection(lr=0.1))
    stage2: StageSection = field(default_factory=lambda: StageSection(lr=0.5))
    hgfc: HGFCSection = field(default_factory=HGFCSection)
    model: ModelSection = field(default_factory=ModelSection)
    synth: SynthSection = field(default_factory=SynthSection)
    seed: int = 0

    # JSON spells the adversarial weight "lambda"
    _ALIASES = {"lambda": "lam"}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def stage1_config(self) -> Stage1Config:
        return Stage1Config(
            epochs=self.stage1.epochs, lr=self.stage1.lr, batch=self.stage1.batch,
            lam=self.lam, temperature=self.temperature, momentum=self.memory_momentum,
            eps=self.dbscan.eps, min_samples=self.dbscan.min_samples,
            satellite_min_samples=self.dbscan.satellite_min_samples,
            dim_out=self.model.dim_out, hidden=self.model.disc_hidden, seed=self.seed,
        )

    def stage2_config(self) -> Stage2Config:
        return Stage2Config(
            epochs=self.stage2.epochs, lr=self.stage2.lr, batch=self.stage2.batch,
            temperature=self.temperature, head_dim=self.model.head_dim,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self.seed, **asdict(self.synth))


# (section, key) -> (predicate, description)
_RANGES: dict[tuple[str, str], tuple[Any, str]] = {
    ("dbscan", "eps"): (lambda v: 0 < v <= 2, "in (0, 2]"),
    ("dbscan", "min_samples"): (lambda v: v >= 1, ">= 1"),
    ("dbscan", "satellite_min_samples"): (lambda v: v >= 1, ">= 1"),
    ("", "temperature"): (lambda v: v > 0, "> 0"),
    ("", "lam"): (lambda v: v >= 0, ">= 0"),
    ("", "memory_momentum"): (lambda v: 0 <= v <= 1, "in [0, 1]"),
    ("stage1", "epochs"): (lambda v: v >= 0, ">= 0"),
    ("stage1", "lr"): (lambda v: v >= 0, ">= 0"),
    ("stage1", "batch"): (lambda v: v >= 3, ">= 3"),
    ("stage2", "epochs"): (lambda v: v >= 0, ">= 0"),
    ("stage2", "lr"): (lambda v: v >= 0, ">= 0"),
    ("stage2", "batch"): (lambda v: v >= 2, ">= 2"),
    ("hgfc", "k"): (lambda v: v >= 1, ">= 1"),
    ("hgfc", "consist_threshold"): (lambda v: 0 <= v <= 1, "in [0, 1]"),
    ("hgfc", "vote_mode"): (lambda v: v in (INSTANCE, CLUSTER), f"one of {INSTANCE!r}, {CLUSTER!r}"),
    ("model", "dim_out"): (lambda v: v >= 1, ">= 1"),
    ("model", "disc_hidden"): (lambda v: v >= 1, ">= 1"),
    ("model", "head_dim"): (lambda v: v >= 1, ">= 1"),
    ("model", "encoder_init"): (lambda v: v in ENCODER_INITS, f"one of {ENCODER_INITS}"),
    ("synth", "num_classes"): (lambda v: v >= 1, ">= 1"),
    ("synth", "drones_per_class"): (lambda v: v >= 1, ">= 1"),
    ("synth", "sats_per_class"): (lambda v: v >= 1, ">= 1"),
    ("synth", "dim"): (lambda v: v >= 1, ">= 1"),
    ("synth", "gap_strength"): (lambda v: v >= 0, ">= 0"),
    ("synth", "noise_sigma"): (lambda v: v >= 0, ">= 0"),
}


def _coerce(value: Any, like: Any, where: str) -> Any:
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(like, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _apply(obj: Any, raw: dict, prefix: str) -> None:
    known = {f.name for f in fields(obj) if not f.name.startswith("_")}
    for key, value in raw.items():
        name = PipelineConfig._ALIASES.get(key, key) if prefix == "" else key
        where = f"{prefix}.{key}" if prefix else key
        if name not in known:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(obj, name)
        if hasattr(current, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            _apply(current, value, where)
        else:
            setattr(obj, name, _coerce(value, current, where))


def validate(cfg: PipelineConfig) -> PipelineConfig:
    for (section, key), (ok, desc) in _RANGES.items():
        holder = getattr(cfg, section) if section else cfg
        value = getattr(holder, key)
        if not ok(value):
            shown = "lambda" if key == "lam" else key
            raise ConfigError(f"{section + '.' if section else ''}{shown} must be {desc}, got {value!r}")
    return cfg


def from_dict(raw: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(base) if base is not None else PipelineConfig()
    _apply(cfg, raw, "")
    return validate(cfg)


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(raw)
