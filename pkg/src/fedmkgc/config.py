"""Experiment configuration: strict JSON documents mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import ConfigError, PartitionConfig
from .fedproto import TrainingConfig
from .objectives import LossWeights


@dataclass
class SynthConfig:
    num_entities: int = 300
    num_relations: int = 24
    num_triples: int = 3000
    latent_dim: int = 8
    num_types: int = 10
    temperature: float = 0.05
    d_v: int = 16
    d_d: int = 16
    variants_per_entity: int = 4
    feature_noise: float = 0.3


@dataclass
class DataConfig:
    """Either a synthetic generator, raw files, or an existing partition directory."""

    synthetic: SynthConfig | None = None
    triples: str | None = None
    features_v: str | None = None
    features_d: str | None = None
    partition_dir: str | None = None

    def __post_init__(self):
        sources = [self.synthetic is not None, self.triples is not None, self.partition_dir is not None]
        if sum(sources) > 1:
            raise ConfigError("data: give exactly one of synthetic, triples, partition_dir")
        if sum(sources) == 0:
            self.synthetic = SynthConfig()
        if self.triples is not None and (self.features_v is None) != (self.features_d is None):
            raise ConfigError("data: features_v and features_d come together")


@dataclass
class PartitionSection:
    num_clients: int = 3
    dirichlet_alpha: float = 0.1
    availability_rate: float = 0.5
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class TrainingSection:
    rounds: int = 100
    local_epochs: int = 3
    batch_size: int = 1024
    negatives: int = 256
    lr: float = 1e-3
    patience: int = 5
    sample_fraction: float = 1.0
    warmstart_rounds: int = 0
    objective: str = "mmfed3"
    imputer: str = "hide"
    fusion: str = "weighted"
    recon: str = "cra"
    dim: int = 32
    gamma: float = 9.0
    diffusion_steps: int = 10
    beta_low: float = 5e-4
    beta_up: float = 5e-2
    beta_scale: float | None = 1e-4
    diffusion_start: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionSection = field(default_factory=PartitionSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    loss: LossWeights = field(default_factory=LossWeights)
    record_wall_time: bool = True
    output_dir: str | None = None

    def partition_config(self) -> PartitionConfig:
        p = self.partition
        return PartitionConfig(p.num_clients, p.dirichlet_alpha, p.availability_rate, tuple(p.split), self.seed)

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**dataclasses.asdict(self.training), seed=self.seed, weights=self.loss)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of everything that affects results (the output directory does not)."""
        doc = self.to_dict()
        doc.pop("output_dir", None)
        doc.pop("record_wall_time", None)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# strict loading -------------------------------------------------------------


def _check_scalar(value, tp, where: str):
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _convert(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return build(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (inner,) = typing.get_args(tp)
        return [_convert(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if value is None:
        raise ConfigError(f"{where}: null is not allowed here")
    return _check_scalar(value, tp, where)


def build(cls, doc: dict, where: str = "config"):
    """Instantiate dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {k: _convert(v, hints[k], f"{where}.{k}") for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Run every downstream validator so errors surface before any work starts."""
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    try:
        cfg.partition_config()
        cfg.training_config()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    return validate(build(ExperimentConfig, doc))


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)


def with_override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one dotted key replaced (validated like file input)."""
    doc = cfg.to_dict()
    node = doc
    parts = dotted.split(".")
    for key in parts[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if node[key] is None:
            node[key] = {}
        node = node[key]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value
    return from_dict(doc)
