"""Per-method training and evaluation, shared by the CLI and the tests.

A run is one (method, seed).  It has ``ensemble_size`` members; member
``m`` of run seed ``s`` is trained with seed ``s * M + m`` so runs never
share members.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import baselines, lleb, nets
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import OODPair, make_ood_pair
from .flow import NeuralSplineFlow
from .lleb import FCGenerator, LLEBModel
from .metrics import EvalReport, Member, PosteriorSamples, evaluate_method
from .nets import Architecture, ClassifierParams
from .rng import make_rng

log = logging.getLogger(__name__)


class MismatchError(ValueError):
    """Checkpoint and config disagree (method or architecture)."""


@dataclass
class Run:
    seed: int
    member_seeds: list
    members: list                      # ClassifierParams | LaplacePosterior | LLEBModel
    traces: dict = field(default_factory=dict)


def member_seeds(seed: int, M: int) -> list:
    return [seed * M + m for m in range(M)]


def load_data(cfg: ExperimentConfig, seed: int) -> OODPair:
    return make_ood_pair(cfg.dataset, cfg.data_config(seed))


def train_member(cfg: ExperimentConfig, arch: Architecture, data, seed: int):
    """Train one member; returns ``(member, {stage: loss trace})``."""
    hp = cfg.train_config()
    if cfg.method == "lleb_e2e":
        model = lleb.train_end_to_end(arch, data, cfg.flow_config(), hp, seed, cfg.samples,
                                      lleb.SPLINE_FLOW, cfg.regularization())
        return model, {"end_to_end": model.trace}
    params, trace = nets.train_classifier(arch, data, hp, seed)
    traces = {"classifier": trace}
    if cfg.method in ("default", "mcd"):
        return params, traces
    if cfg.method == "lll":
        return baselines.laplace_fit(params, data, cfg.prior_precision), traces
    model = lleb.train_two_step(params, data, cfg.flow_config(), cfg.flow_train_config(), seed,
                                cfg.samples, cfg.sampler_kind, cfg.regularization())
    traces["flow"] = model.trace
    return model, traces


def train_run(cfg: ExperimentConfig, seed: int, data: OODPair | None = None) -> Run:
    arch = cfg.architecture()
    data = data if data is not None else load_data(cfg, seed)
    seeds = member_seeds(seed, cfg.ensemble_size)
    members, traces = [], {}
    for s in seeds:
        log.info("training %s seed %d (member seed %d)", cfg.method, seed, s)
        m, t = train_member(cfg, arch, data.train, s)
        members.append(m)
        traces[str(s)] = t
    return Run(seed, seeds, members, traces)


# ---------------------------------------------------------------------------
# posterior samples


def member_samples(cfg: ExperimentConfig, member, rng: np.random.Generator) -> PosteriorSamples:
    S = cfg.samples
    if cfg.method == "default":
        return PosteriorSamples([Member(member)])
    if cfg.method == "mcd":
        return baselines.mcd_samples(member, S)
    if cfg.method == "lll":
        return baselines.laplace_sample(member, S, rng)
    return lleb.sample_posterior(member, S, rng)


def run_samples(cfg: ExperimentConfig, run: Run, rng: np.random.Generator) -> PosteriorSamples:
    """Pool every member's draws with uniform weight."""
    return PosteriorSamples.concat([member_samples(cfg, m, rng) for m in run.members])


def evaluate_run(cfg: ExperimentConfig, run: Run, data: OODPair | None = None) -> EvalReport:
    data = data if data is not None else load_data(cfg, run.seed)
    rng = make_rng(run.seed, "eval")
    samples = run_samples(cfg, run, rng)
    return evaluate_method(samples, data.test, data.ood, rng, cfg.method, run.seed,
                           cfg.ensemble_size, cfg.ece_bins)


# ---------------------------------------------------------------------------
# checkpoint packing


def _pack_member(member, prefix: str, out: dict):
    if isinstance(member, ClassifierParams):
        for k, v in member.tensors.items():
            out[f"{prefix}/net/{k}"] = v
    elif isinstance(member, baselines.LaplacePosterior):
        _pack_member(member.params, prefix, out)
        out[f"{prefix}/laplace/chol"] = member.chol
    elif isinstance(member, LLEBModel):
        for k, v in member.backbone.items():
            out[f"{prefix}/net/{k}"] = v
        out[f"{prefix}/base_last"] = member.base_last
        for k, v in member.sampler.params.items():
            out[f"{prefix}/sampler/{k}"] = v
    else:
        raise TypeError(f"cannot serialise {type(member).__name__}")


def to_checkpoint(cfg: ExperimentConfig, runs: list) -> Checkpoint:
    tensors = {}
    for run in runs:
        for m, member in enumerate(run.members):
            _pack_member(member, f"seed{run.seed}/member{m}", tensors)
    meta = {"runs": [{"seed": r.seed, "member_seeds": r.member_seeds} for r in runs]}
    return Checkpoint(cfg.method, cfg.architecture().to_dict(), tensors, cfg.to_dict(), meta)


def _group(tensors: dict, prefix: str, kind: str) -> dict:
    head = f"{prefix}/{kind}/"
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}


def _unpack_member(cfg: ExperimentConfig, arch: Architecture, tensors: dict, prefix: str):
    net = _group(tensors, prefix, "net")
    if cfg.method in ("default", "mcd"):
        return ClassifierParams(arch, net)
    if cfg.method == "lll":
        params = ClassifierParams(arch, net)
        chol = tensors[f"{prefix}/laplace/chol"]
        return baselines.LaplacePosterior(params, params.flatten_last(), chol @ chol.T, chol, cfg.prior_precision)
    sp = _group(tensors, prefix, "sampler")
    if cfg.method == "fc_sampler":
        sampler = FCGenerator(arch.split_dim, cfg.hidden_features, sp)
    else:
        sampler = NeuralSplineFlow(arch.split_dim, cfg.flow_config(), sp)
    mode = lleb.END_TO_END if cfg.method == "lleb_e2e" else lleb.TWO_STEP
    return LLEBModel(arch, net, tensors[f"{prefix}/base_last"], sampler, mode, cfg.sampler_kind)


def from_checkpoint(ckpt: Checkpoint, cfg: ExperimentConfig) -> list:
    if ckpt.method != cfg.method:
        raise MismatchError(f"checkpoint holds method {ckpt.method!r} but the config asks for {cfg.method!r}")
    arch = cfg.architecture()
    if Architecture.from_dict(ckpt.architecture) != arch:
        raise MismatchError("checkpoint architecture differs from the config architecture")
    runs = []
    for r in ckpt.meta["runs"]:
        members = [_unpack_member(cfg, arch, ckpt.tensors, f"seed{r['seed']}/member{m}")
                   for m in range(len(r["member_seeds"]))]
        runs.append(Run(r["seed"], r["member_seeds"], members))
    return runs
