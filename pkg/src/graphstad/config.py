"""Pipeline configuration: one section per stage, loaded from YAML/JSON with env overrides.

Environment variables named ``GRAPHSTAD__<SECTION>__<KEY>`` override file
values; the value is parsed as YAML, so ``GRAPHSTAD__TRAIN__EPOCHS=12`` and
``GRAPHSTAD__ARCH__CNN_FEATURES=[8,16,32,64]`` both work.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .geometry import GeometryConfig
from .model import ArchConfig
from .simlab import WorldConfig
from .training import LossConfig, TrainConfig

ENV_PREFIX = "GRAPHSTAD__"
TOY_ARCH = dict(cnn_features=(8, 16, 32, 64), gnn_features=(16, 32, 64, 64), lstm_sizes=(32, 16), latent=16)
FULL_DISABLED_RBX = ("RBX05",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RenormConfig:
    K: float | None = None
    lr: float = 3e-3
    max_iters: int = 3000
    patience: int = 200
    val_fraction: float = 0.2
    batch_size: int = 64


@dataclass(frozen=True)
class InjectionConfig:
    kind: str = "degraded"
    factor: float | None = None      # defaults per kind: dead 0, hot 2, degraded 0.4
    persistence: str = "window"
    ls_fraction: float = 0.5         # 0.5 x 0.02 = 1% of test cells
    channel_fraction: float = 0.02
    seed: int = 0

    def resolved_factor(self) -> float:
        if self.factor is not None:
            return float(self.factor)
        return {"dead": 0.0, "hot": 2.0, "degraded": 0.4}[self.kind]


@dataclass(frozen=True)
class EvaluationConfig:
    anchors: tuple[float, ...] = (0.90, 0.95, 0.99)
    alpha: float = 5.0
    score_mode: str = "auto"         # auto: windowed for temporal models, isolated for single-map ones
    calibration_stride: int = 1
    factors: tuple[float, ...] = (0.8, 0.6, 0.4, 0.2, 0.0)
    variants: tuple[str, ...] = ("graphstad", "nontemporal")
    seeds: tuple[int, ...] = (0, 1, 2)
    batch_size: int = 8

    def __post_init__(self):
        for k in ("anchors", "factors", "variants", "seeds"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        if self.score_mode not in ("auto", "windowed", "isolated"):
            raise ConfigError("evaluation.score_mode must be auto, windowed or isolated")


SECTIONS = {
    "geometry": GeometryConfig,
    "world": WorldConfig,
    "arch": ArchConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "renorm": RenormConfig,
    "injection": InjectionConfig,
    "evaluation": EvaluationConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig.toy)
    world: WorldConfig = field(default_factory=WorldConfig)
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(**TOY_ARCH))
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, patience=5))
    renorm: RenormConfig = field(default_factory=RenormConfig)
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0

    @classmethod
    def preset(cls, geometry: str = "toy") -> "PipelineConfig":
        if geometry == "toy":
            return cls()
        if geometry == "full":
            return cls(geometry=GeometryConfig.full(disabled_rbx=FULL_DISABLED_RBX), arch=ArchConfig(),
                       train=TrainConfig())
        raise ConfigError(f"geometry must be 'full' or 'toy', got {geometry!r}")

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed, world=replace(self.world, seed=seed), train=replace(self.train, seed=seed),
                       injection=replace(self.injection, seed=seed))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _update_section(base, section: str, values: Mapping[str, Any]):
    if not isinstance(values, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(base)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}")
    try:
        return replace(base, **{k: _tuplify(v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from None


def merge(cfg: PipelineConfig, doc: Mapping[str, Any]) -> PipelineConfig:
    """Apply a nested mapping of overrides, rejecting unknown sections and keys."""
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown section {unknown[0]!r}")
    updates: dict[str, Any] = {}
    if "seed" in doc:
        updates["seed"] = int(doc["seed"])
    for name in SECTIONS:
        if name in doc:
            updates[name] = _update_section(getattr(cfg, name), name, doc[name])
    return replace(cfg, **updates)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    doc: dict[str, Any] = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(raw)
        if parts == ["seed"]:
            doc["seed"] = value
        elif len(parts) == 2:
            doc.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"malformed override variable {key}")
    return doc


def load_config(path: str | Path | None = None, geometry: str | None = None,
                environ: Mapping[str, str] | None = None) -> PipelineConfig:
    """Preset for ``geometry``, then the file at ``path``, then environment overrides."""
    doc: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}".replace("\n", " ")) from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    name = geometry or doc.pop("preset", None) or "toy"
    cfg = PipelineConfig.preset(name)
    cfg = merge(cfg, doc)
    return merge(cfg, env_overrides(environ))
