"""Posterior samples and the method-agnostic evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import nets
from .nets import ClassifierParams


# ---------------------------------------------------------------------------
# posterior samples


@dataclass
class Member:
    """One backbone and the draws attached to it.

    ``last_layers`` holds flattened last-layer draws ``(k, split_dim)``; when
    None the member is the single point mass ``params``.  A positive
    ``dropout_samples`` instead makes the member ``k`` Monte Carlo dropout
    passes through ``params``.
    """

    params: ClassifierParams
    last_layers: np.ndarray | None = None
    dropout_samples: int = 0

    def __len__(self) -> int:
        if self.dropout_samples:
            return self.dropout_samples
        return 1 if self.last_layers is None else len(self.last_layers)


@dataclass
class PosteriorSamples:
    """Uniformly weighted draws from q*, pooled over members."""

    members: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("posterior samples must be non-empty")
        arch = self.members[0].params.arch
        if any(m.params.arch != arch for m in self.members):
            raise ValueError("all members must share one architecture")

    def __len__(self) -> int:
        return sum(len(m) for m in self.members)

    @property
    def arch(self) -> nets.Architecture:
        return self.members[0].params.arch

    @classmethod
    def concat(cls, parts: Sequence["PosteriorSamples"]) -> "PosteriorSamples":
        return cls([m for p in parts for m in p.members])

    def full_vectors(self) -> np.ndarray:
        """Explicit full parameter vectors, one row per draw (not for dropout members)."""
        rows = []
        for m in self.members:
            if m.dropout_samples:
                raise ValueError("dropout members have no explicit parameter vectors")
            bb = m.params.backbone()
            back = np.concatenate([bb[k].ravel() for k in sorted(bb)]) if bb else np.zeros(0)
            lasts = m.params.flatten_last()[None] if m.last_layers is None else m.last_layers
            rows.extend(np.concatenate([back, ll]) for ll in lasts)
        return np.stack(rows)

    def prob_rows(self, x: np.ndarray, rng: np.random.Generator | None = None,
                  chunk: int = 2048) -> np.ndarray:
        """Per-draw class probabilities, ``(S, N, C)``."""
        out = []
        for m in self.members:
            if m.dropout_samples:
                if rng is None:
                    raise ValueError("an rng is needed for Monte Carlo dropout members")
                out.append(dropout_rows(m.params, x, m.dropout_samples, rng, chunk))
            else:
                lasts = m.params.flatten_last()[None] if m.last_layers is None else m.last_layers
                out.append(last_layer_rows(m.params, x, lasts, chunk))
        return np.concatenate(out, axis=0)


def last_layer_rows(params: ClassifierParams, x: np.ndarray, lasts: np.ndarray,
                    chunk: int = 2048) -> np.ndarray:
    arch = params.arch
    w, b = nets.split_last(lasts, arch)
    rows = []
    for s in range(0, len(x), chunk):
        f = nets.features(arch, params.tensors, x[s:s + chunk]).data
        logits = np.einsum("nh,shc->snc", f, w) + b[:, None, :]
        rows.append(nets.softmax_np(logits))
    if not rows:
        return np.zeros((len(lasts), 0, arch.num_classes))
    return np.concatenate(rows, axis=1)


def dropout_rows(params: ClassifierParams, x: np.ndarray, n_samples: int,
                 rng: np.random.Generator, chunk: int = 2048) -> np.ndarray:
    rows = np.zeros((n_samples, len(x), params.arch.num_classes))
    for s in range(n_samples):
        for c in range(0, len(x), chunk):
            logits = nets.net_forward(params, x[c:c + chunk], dropout_active=True, rng=rng).data
            rows[s, c:c + chunk] = nets.softmax_np(logits)
    return rows


# ---------------------------------------------------------------------------
# metrics


def predictive(prob_rows) -> np.ndarray:
    """Average per-draw class probabilities over the leading sample axis."""
    rows = np.asarray(prob_rows, dtype=np.float64)
    if np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("probability rows must sum to 1")
    return rows.mean(axis=0)


def accuracy(pred_probs, labels) -> float:
    pred = np.argmax(np.asarray(pred_probs), axis=-1)  # argmax picks the lowest index on ties
    return float(np.mean(pred == np.asarray(labels)))


def ece(pred_probs, labels, bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins on (0, 1]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs = np.asarray(pred_probs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        return 0.0
    conf = probs.max(axis=-1)
    correct = np.argmax(probs, axis=-1) == labels
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        nb = int(sel.sum())
        if nb:
            total += nb / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def epistemic_variance(prob_rows) -> np.ndarray | float:
    """Sum over classes of the population variance across draws.

    ``(S, C)`` gives a float; ``(S, N, C)`` gives one score per input.
    """
    rows = np.asarray(prob_rows, dtype=np.float64)
    # shifting by the first draw keeps identical draws at exactly zero
    v = (rows - rows[:1]).var(axis=0).sum(axis=-1)
    return float(v) if np.ndim(v) == 0 else v


def auroc(in_scores, ood_scores) -> float:
    """Probability that an OOD score exceeds an in-distribution one (ties 1/2)."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs non-empty score lists")
    ranks = rankdata(np.concatenate([a, b]))
    # twice the Mann-Whitney U is an exact integer
    u2 = int(round(2 * ranks[a.size:].sum())) - b.size * (b.size + 1)
    return u2 / (2 * a.size * b.size)


@dataclass
class EvalReport:
    method: str
    seed: int
    accuracy: float
    ece: float
    auroc: float | None
    test_scores: np.ndarray
    ood_scores: np.ndarray
    n_samples: int
    ensemble_size: int = 1
    dataset: str = ""

    @property
    def auroc_applicable(self) -> bool:
        return self.auroc is not None

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "seed": int(self.seed),
            "ensemble_size": int(self.ensemble_size),
            "dataset": self.dataset,
            "n_samples": int(self.n_samples),
            "accuracy": float(self.accuracy),
            "ece": float(self.ece),
            "auroc": None if self.auroc is None else float(self.auroc),
            "auroc_applicable": self.auroc_applicable,
            "test_scores": [float(v) for v in self.test_scores],
            "ood_scores": [float(v) for v in self.ood_scores],
        }

    @classmethod
    def from_record(cls, r: dict) -> "EvalReport":
        return cls(r["method"], r["seed"], r["accuracy"], r["ece"], r["auroc"],
                   np.asarray(r["test_scores"]), np.asarray(r["ood_scores"]),
                   r["n_samples"], r.get("ensemble_size", 1), r.get("dataset", ""))


def evaluate_method(samples: PosteriorSamples, test, ood, rng: np.random.Generator | None = None,
                    method: str = "", seed: int = 0, ensemble_size: int = 1,
                    bins: int = 15) -> EvalReport:
    """Accuracy and ECE of the predictive on ``test``; epistemic scores on
    ``test`` and ``ood`` and their AUROC.

    AUROC is reported as not applicable (None) for a single point mass.
    """
    rows_test = samples.prob_rows(test.features, rng)
    rows_ood = samples.prob_rows(ood.features, rng)
    pred = predictive(rows_test)
    s_test = epistemic_variance(rows_test)
    s_ood = epistemic_variance(rows_ood)
    score = auroc(s_test, s_ood) if len(samples) > 1 else None
    return EvalReport(
        method=method,
        seed=seed,
        accuracy=accuracy(pred, test.labels),
        ece=ece(pred, test.labels, bins),
        auroc=score,
        test_scores=np.atleast_1d(s_test),
        ood_scores=np.atleast_1d(s_ood),
        n_samples=len(samples),
        ensemble_size=ensemble_size,
        dataset=getattr(test, "name", ""),
    )
