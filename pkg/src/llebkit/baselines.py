"""Comparison methods: deep ensembles, Monte Carlo dropout, last-layer Laplace.

Each produces :class:`~llebkit.metrics.PosteriorSamples`, so evaluation
never branches on the method.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import nets
from .metrics import Member, PosteriorSamples, dropout_rows
from .nets import Architecture, ClassifierParams, TrainConfig


class LaplaceError(np.linalg.LinAlgError):
    """Posterior precision is not positive definite."""


@dataclass
class EnsembleModel:
    members: list
    seeds: list
    traces: list | None = None


def train_ensemble(arch: Architecture, data, hp: TrainConfig, M: int, base_seed: int) -> EnsembleModel:
    """``M`` maximum-likelihood runs; member ``m`` uses seed ``base_seed + m``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    members, seeds, traces = [], [], []
    for m in range(M):
        params, trace = nets.train_classifier(arch, data, hp, base_seed + m)
        members.append(params)
        seeds.append(base_seed + m)
        traces.append(trace)
    return EnsembleModel(members, seeds, traces)


def ensemble_posterior_samples(ens: EnsembleModel) -> PosteriorSamples:
    """The mixture's support: one point mass per member, in member order."""
    return PosteriorSamples([Member(p) for p in ens.members])


def mcd_posterior_samples(params: ClassifierParams, x: np.ndarray, S: int,
                          rng: np.random.Generator) -> np.ndarray:
    """``S`` stochastic forward passes with dropout active; ``(S, N, C)`` probabilities."""
    if not params.arch.has_dropout:
        raise ValueError("Monte Carlo dropout needs an architecture with a dropout layer")
    if S < 1:
        raise ValueError("S must be >= 1")
    return dropout_rows(params, x, S, rng)


def mcd_samples(params: ClassifierParams, S: int) -> PosteriorSamples:
    """Lazy form of :func:`mcd_posterior_samples` for the evaluation pipeline."""
    if not params.arch.has_dropout:
        raise ValueError("Monte Carlo dropout needs an architecture with a dropout layer")
    return PosteriorSamples([Member(params, dropout_samples=S)])


# ---------------------------------------------------------------------------
# last-layer Laplace


@dataclass
class LaplacePosterior:
    params: ClassifierParams
    theta_map: np.ndarray
    precision: np.ndarray
    chol: np.ndarray
    prior_precision: float

    @property
    def covariance(self) -> np.ndarray:
        inv = solve_triangular(self.chol, np.eye(len(self.theta_map)), lower=True)
        return inv.T @ inv


def last_layer_ggn(feats: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Generalised Gauss-Newton of the summed cross-entropy with respect to
    the flattened last layer (weights ``(H, C)`` row-major, then bias).

    For a linear-softmax layer this is the exact Hessian:
    ``sum_i J_i^T (diag p_i - p_i p_i^T) J_i``.
    """
    n, h = feats.shape
    c = probs.shape[1]
    phi = np.concatenate([feats, np.ones((n, 1))], axis=1)  # bias acts as feature H
    lam = -probs[:, :, None] * probs[:, None, :]
    lam[:, np.arange(c), np.arange(c)] += probs
    out = np.zeros((h + 1, c, h + 1, c))
    for a in range(c):
        for b in range(a, c):
            blk = (phi * lam[:, a, b][:, None]).T @ phi
            out[:, a, :, b] = blk
            if b != a:
                out[:, b, :, a] = blk.T
    return out.reshape((h + 1) * c, (h + 1) * c)


def laplace_fit(params: ClassifierParams, data, prior_precision: float = 1.0) -> LaplacePosterior:
    """Gaussian over the last layer: ``N(theta_map, (GGN + tau I)^-1)``.

    ``data`` may be a Dataset or a bare feature array (possibly empty).
    """
    if prior_precision <= 0:
        raise ValueError("prior precision must be positive")
    x = getattr(data, "features", data)
    x = np.asarray(x, dtype=np.float64)
    arch = params.arch
    d = arch.split_dim
    if len(x):
        from .lleb import backbone_features

        feats = backbone_features(arch, params.backbone(), x)
        wn, bn = params.head_names
        probs = nets.softmax_np(feats @ params.tensors[wn] + params.tensors[bn])
        H = last_layer_ggn(feats, probs)
    else:
        H = np.zeros((d, d))
    precision = H + prior_precision * np.eye(d)
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as e:
        raise LaplaceError(f"Cholesky of the posterior precision failed ({e}); increase the prior precision") from None
    return LaplacePosterior(params, params.flatten_last(), precision, chol, prior_precision)


def laplace_draws(post: LaplacePosterior, n: int, rng: np.random.Generator, z: np.ndarray | None = None) -> np.ndarray:
    """``theta_map + L^-T z`` with ``L L^T`` the precision; ``(n, split_dim)``."""
    if z is None:
        z = rng.standard_normal((n, len(post.theta_map)))
    return post.theta_map + solve_triangular(post.chol.T, np.asarray(z).T, lower=False).T


def laplace_sample(post: LaplacePosterior, n: int, rng: np.random.Generator,
                   z: np.ndarray | None = None) -> PosteriorSamples:
    return PosteriorSamples([Member(post.params, laplace_draws(post, n, rng, z))])
