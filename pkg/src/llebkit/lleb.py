"""Last-layer empirical Bayes.

A learnable distribution over the classifier's final linear layer is fit by
maximising the Monte Carlo expected log-likelihood

    E_{theta_last ~ q}[ log p(D | theta_last, backbone) ]

either jointly with the backbone (``end_to_end``; the sampled vector is added
to a trainable base last layer) or on a frozen maximum-likelihood backbone
(``two_step``; the sampled vector *is* the last layer).  There is no KL term:
with a prior that is itself learned, the optimal prior equals q and the KL
vanishes, leaving only the expected log-likelihood.

An optional entropy bonus ``lam * H(q)`` is supported for the spline flow.
The ``fc_generator`` sampler replaces the flow with a plain MLP pushforward,
which has no tractable density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .autodiff import Tensor
from .flow import FlowConfig, NeuralSplineFlow
from .metrics import Member, PosteriorSamples
from .nets import Architecture, ClassifierParams, TrainConfig
from .rng import make_rng

END_TO_END = "end_to_end"
TWO_STEP = "two_step"
SPLINE_FLOW = "spline_flow"
FC_GENERATOR = "fc_generator"


class ConfigurationError(ValueError):
    pass


@dataclass
class RegularizationConfig:
    """Entropy weight ``lam`` (any sign).  ``entropy_samples`` draws extra
    samples for the entropy term; None reuses the likelihood samples."""

    lam: float = 0.0
    entropy_samples: int | None = None


# defaults for the flow stage of two-step training
FLOW_TRAIN_DEFAULTS = TrainConfig(epochs=100, lr=1e-5, batch_size=256, weight_decay=1e-5, clip_norm=0.1)


@dataclass
class FCGenerator:
    """MLP pushforward ``z -> theta``; no density evaluation."""

    dim: int
    hidden: int = 100
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, hidden: int = 100) -> "FCGenerator":
        g = cls(dim, hidden)
        for name, fi, fo in (("0", dim, hidden), ("1", hidden, hidden), ("2", hidden, dim)):
            bound = 1.0 / math.sqrt(fi)
            g.params[f"fc{name}.w"] = rng.uniform(-bound, bound, size=(fi, fo))
            g.params[f"fc{name}.b"] = np.zeros(fo)
        return g

    def forward(self, z, weights=None) -> Tensor:
        w = self.params if weights is None else weights
        h = (Tensor(z) if not isinstance(z, Tensor) else z) @ w["fc0.w"] + w["fc0.b"]
        h = h.relu() @ w["fc1.w"] + w["fc1.b"]
        return h.relu() @ w["fc2.w"] + w["fc2.b"]

    def sample(self, n: int, rng: np.random.Generator, weights=None, z=None):
        if z is None:
            z = rng.standard_normal((n, self.dim))
        return self.forward(z, weights), None


@dataclass
class LLEBModel:
    arch: Architecture
    backbone: dict
    base_last: np.ndarray
    sampler: NeuralSplineFlow | FCGenerator
    mode: str = TWO_STEP
    sampler_kind: str = SPLINE_FLOW
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.sampler.dim != self.arch.split_dim:
            raise ValueError("sampler dimension must equal the last-layer size")

    def classifier(self) -> ClassifierParams:
        """Backbone with the base last layer in place."""
        return ClassifierParams(self.arch, dict(self.backbone)).with_last(self.base_last)

    def last_layers(self, draws: np.ndarray) -> np.ndarray:
        if self.mode == END_TO_END:
            return self.base_last + draws
        return np.array(draws)


# ---------------------------------------------------------------------------
# objective


def _split_weights(wt: dict):
    net = {k[4:]: v for k, v in wt.items() if k.startswith("net/")}
    flow = {k[5:]: v for k, v in wt.items() if k.startswith("flow/")}
    return net, flow, wt.get("base")


def _objective(model: LLEBModel, wt: dict | None, feats, labels, S: int,
               noise_rng: np.random.Generator, reg: RegularizationConfig | None,
               entropy_rng: np.random.Generator | None = None) -> Tensor:
    """Monte Carlo expected log-likelihood (+ entropy bonus); larger is better."""
    if S < 1:
        raise ValueError("S must be >= 1")
    if wt is None:
        net_w, flow_w, base = None, None, model.base_last
    else:
        net_w, flow_w, base = _split_weights(wt)
        if base is None:
            base = model.base_last
    theta, logq = model.sampler.sample(S, noise_rng, weights=flow_w or None)
    last = theta + base if model.mode == END_TO_END else theta
    arch = model.arch
    head = arch.layers[-1]
    nw = head.in_features * head.out_features
    w = last[:, :nw].reshape(S, head.in_features, head.out_features)
    b = last[:, nw:]
    logits = nets.head(feats, w, b)
    objective = -nets.cross_entropy(logits, labels)
    if reg is not None and reg.lam != 0.0:
        if model.sampler_kind != SPLINE_FLOW:
            raise ConfigurationError("entropy regularisation needs a density; unavailable for fc_generator")
        if reg.entropy_samples:
            _, logq = model.sampler.sample(reg.entropy_samples, entropy_rng, weights=flow_w or None)
        objective = objective + reg.lam * (-logq.mean())
    return objective


def mc_expected_loglik(model: LLEBModel, batch, S: int = 10,
                       rng: np.random.Generator | None = None, weights: dict | None = None) -> Tensor:
    """Average over ``S`` sampler draws of the mean per-example log-likelihood."""
    x, y = batch
    rng = rng if rng is not None else np.random.default_rng()
    if weights is not None:
        net_w, _, _ = _split_weights(weights)
    else:
        net_w = {}
    bb = {**model.backbone, **net_w}
    feats = nets.features(model.arch, bb, x)
    return _objective(model, weights, feats, y, S, rng, None)


# ---------------------------------------------------------------------------
# trainers


def _make_sampler(kind: str, dim: int, flow_cfg: FlowConfig | None, rng):
    if kind == SPLINE_FLOW:
        return NeuralSplineFlow.create(dim, flow_cfg, rng)
    if kind == FC_GENERATOR:
        hidden = (flow_cfg or FlowConfig()).hidden_features
        return FCGenerator.create(dim, rng, hidden)
    raise ConfigurationError(f"unknown sampler kind {kind!r}")


def _check_reg(kind: str, reg: RegularizationConfig | None):
    if reg is not None and reg.lam != 0.0 and kind != SPLINE_FLOW:
        raise ConfigurationError("entropy regularisation is unavailable for fc_generator (no density)")


def _fit(model: LLEBModel, data, hp: TrainConfig, seed: int, S: int,
         reg: RegularizationConfig | None, train_backbone: bool, feats=None):
    noise_rng = make_rng(seed, "flow-noise")
    entropy_rng = make_rng(seed, "entropy")
    drop_rng = make_rng(seed, "dropout")
    params = {f"flow/{k}": v for k, v in model.sampler.params.items()}
    if train_backbone:
        params.update({f"net/{k}": v for k, v in model.backbone.items()})
        params["base"] = model.base_last
    x, y = data.features, data.labels

    def loss_fn(wt, idx):
        if train_backbone:
            net_w, _, _ = _split_weights(wt)
            fb = nets.features(model.arch, net_w, x[idx], dropout_active=True, rng=drop_rng)
        else:
            fb = feats[idx]
        return -_objective(model, wt, fb, y[idx], S, noise_rng, reg, entropy_rng)

    params, trace = nets.optimise(params, loss_fn, len(y), hp, make_rng(seed, "flow-batches"), "lleb")
    model.sampler.params = {k[5:]: v for k, v in params.items() if k.startswith("flow/")}
    if train_backbone:
        model.backbone = {k[4:]: v for k, v in params.items() if k.startswith("net/")}
        model.base_last = params["base"]
    model.trace = trace
    return model


def backbone_features(arch: Architecture, backbone: dict, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Deterministic (dropout off) penultimate features, computed once."""
    out = [nets.features(arch, backbone, x[s:s + chunk]).data for s in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, arch.feature_dim))


def train_end_to_end(arch: Architecture, data, flow_cfg: FlowConfig | None, hp: TrainConfig,
                     seed: int, S: int = 10, sampler_kind: str = SPLINE_FLOW,
                     reg: RegularizationConfig | None = None) -> LLEBModel:
    """Jointly fit backbone, base last layer and sampler."""
    _check_reg(sampler_kind, reg)
    init = nets.init_params(arch, make_rng(seed, "init"))
    sampler = _make_sampler(sampler_kind, arch.split_dim, flow_cfg, make_rng(seed, "flow-init"))
    model = LLEBModel(arch, init.backbone(), init.flatten_last(), sampler, END_TO_END, sampler_kind)
    return _fit(model, data, hp, seed, S, reg, train_backbone=True)


def train_two_step(pretrained: ClassifierParams, data, flow_cfg: FlowConfig | None,
                   hp: TrainConfig = FLOW_TRAIN_DEFAULTS, seed: int = 0, S: int = 10,
                   sampler_kind: str = SPLINE_FLOW,
                   reg: RegularizationConfig | None = None) -> LLEBModel:
    """Fit the sampler on a frozen backbone; the pretrained last layer is discarded."""
    _check_reg(sampler_kind, reg)
    arch = pretrained.arch
    backbone = {k: v.copy() for k, v in pretrained.backbone().items()}
    sampler = _make_sampler(sampler_kind, arch.split_dim, flow_cfg, make_rng(seed, "flow-init"))
    model = LLEBModel(arch, backbone, np.zeros(arch.split_dim), sampler, TWO_STEP, sampler_kind)
    feats = backbone_features(arch, backbone, data.features)
    return _fit(model, data, hp, seed, S, reg, train_backbone=False, feats=feats)


def train_regularized(reg: RegularizationConfig, *, mode: str = TWO_STEP, **kwargs) -> LLEBModel:
    """Entropy-regularised trainer; ``kwargs`` are those of the chosen trainer."""
    if mode == TWO_STEP:
        return train_two_step(reg=reg, **kwargs)
    if mode == END_TO_END:
        return train_end_to_end(reg=reg, **kwargs)
    raise ConfigurationError(f"unknown mode {mode!r}")


def sample_posterior(model: LLEBModel, n: int, rng: np.random.Generator) -> PosteriorSamples:
    """``n`` draws of the full network: fixed backbone, sampled last layer."""
    theta, _ = model.sampler.sample(n, rng)
    return PosteriorSamples([Member(model.classifier(), model.last_layers(theta.data))])


def sampler_std(model: LLEBModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-coordinate standard deviation of ``n`` last-layer draws."""
    theta, _ = model.sampler.sample(n, rng)
    return theta.data.std(axis=0)
