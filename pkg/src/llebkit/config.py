"""Experiment configuration: a flat, typed key-value file (YAML syntax).

Every key is optional; absent keys take the documented defaults below.
Unknown keys and wrongly typed values are errors that name the key.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import nets
from .data import OOD_KINDS, DataConfig
from .flow import FlowConfig
from .lleb import FC_GENERATOR, SPLINE_FLOW, RegularizationConfig
from .nets import TrainConfig

METHODS = ("default", "lleb", "lleb_e2e", "mcd", "lll", "fc_sampler")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str = "lleb"
    dataset: str = "two_moons_vs_ring"
    arch: str = "two_moons_mlp"
    dropout: float = 0.2
    # classifier training
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 1e-5
    clip_norm: float = 0.1
    # flow stage of two-step training (weight decay / clipping shared with the classifier)
    flow_epochs: int = 100
    flow_lr: float = 1e-5
    flow_batch_size: int = 256
    # flow architecture
    hidden_features: int = 100
    coupling_layers: int = 2
    residual_blocks: int = 2
    bins: int = 11
    tail_bound: float = 10.0
    # posterior / evaluation
    samples: int = 10
    ensemble_size: int = 1
    lam: float = 0.0
    entropy_samples: int = 0
    prior_precision: float = 1.0
    ece_bins: int = 15
    seeds: list = field(default_factory=lambda: [0])
    # data
    n_train: int = 1000
    n_test: int = 1000
    n_ood: int = 1000
    noise: float = 0.1
    ring_radius: float = 4.0
    mnist_dir: str = ""
    fashion_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown value {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.dataset not in OOD_KINDS:
            raise ConfigError(f"dataset: unknown value {self.dataset!r}; expected one of {', '.join(OOD_KINDS)}")
        if self.arch not in nets.ARCHITECTURES:
            raise ConfigError(f"arch: unknown value {self.arch!r}; expected one of {', '.join(nets.ARCHITECTURES)}")
        for name in ("epochs", "flow_epochs", "batch_size", "flow_batch_size", "samples", "ensemble_size",
                     "hidden_features", "coupling_layers", "bins", "ece_bins", "n_train", "n_test", "n_ood"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("residual_blocks", "entropy_samples"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout: must be in [0, 1)")
        if self.prior_precision <= 0:
            raise ConfigError("prior_precision: must be positive")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if self.lam != 0.0 and self.method == "fc_sampler":
            raise ConfigError("lam: entropy regularisation is unavailable for fc_sampler")

    # -- derived views -------------------------------------------------------

    def architecture(self) -> nets.Architecture:
        return nets.ARCHITECTURES[self.arch](dropout=self.dropout)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.batch_size, self.weight_decay, self.clip_norm)

    def flow_train_config(self) -> TrainConfig:
        return TrainConfig(self.flow_epochs, self.flow_lr, self.flow_batch_size, self.weight_decay, self.clip_norm)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(hidden_features=self.hidden_features, coupling_layers=self.coupling_layers,
                          residual_blocks=self.residual_blocks, bins=self.bins, tail_bound=self.tail_bound)

    def regularization(self) -> RegularizationConfig:
        return RegularizationConfig(self.lam, self.entropy_samples or None)

    @property
    def sampler_kind(self) -> str:
        return FC_GENERATOR if self.method == "fc_sampler" else SPLINE_FLOW

    def data_config(self, seed: int) -> DataConfig:
        """Synthetic data is regenerated per run seed; image data ignores it."""
        return DataConfig(self.n_train, self.n_test, self.n_ood, self.noise, self.ring_radius,
                          seed, self.mnist_dir, self.fashion_dir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value, default):
    want = type(default)
    if want is bool:
        ok = isinstance(value, bool)
    elif want is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif want is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif want is list:
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{name}: expected {want.__name__}, got {value!r}")
    return value


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping of key: value lines")
    defaults = ExperimentConfig()
    kw = {}
    for key, value in d.items():
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown config key")
        kw[key] = _coerce(key, value, getattr(defaults, key))
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not a valid key-value file ({e})") from None
    return config_from_dict(d or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
