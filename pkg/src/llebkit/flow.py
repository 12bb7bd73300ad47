"""Neural spline flow: a standard Gaussian pushed through rational-quadratic
spline coupling layers.

Sampling runs the layers forward, ``theta = f(z)``; density evaluation runs
them backward, ``log q(theta) = log N(f^-1(theta)) + log|det J_{f^-1}(theta)|``.
Both directions are built from tape-aware ops, so samples and their
log-densities are differentiable with respect to the flow parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    hidden_features: int = 100
    coupling_layers: int = 2
    residual_blocks: int = 2
    bins: int = 11
    tail_bound: float = 10.0
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3


# ---------------------------------------------------------------------------
# rational-quadratic spline


def _derivative_shift(min_derivative: float) -> float:
    # unnormalised value 0 maps to a knot derivative of exactly 1
    return math.log(math.expm1(1.0 - min_derivative))


def _knots(u: Tensor, min_size: float, bound: float):
    """Normalise bin logits ``(n, m, K)`` into knot positions ``(n, m, K+1)``
    spanning ``[-bound, bound]`` and bin sizes ``(n, m, K)``."""
    n, m, k = u.shape
    p = ad.softmax(u, axis=-1)
    p = min_size + (1.0 - min_size * k) * p
    c = ad.cumsum(p, axis=-1) * (2.0 * bound) - bound
    lo = np.full((n, m, 1), -bound)
    hi = np.full((n, m, 1), bound)
    knots = ad.concat([lo, c[..., : k - 1], hi], axis=-1)
    sizes = knots[..., 1:] - knots[..., :-1]
    return knots, sizes


def _search(knots: np.ndarray, x: np.ndarray) -> np.ndarray:
    k = knots.shape[-1] - 1
    edges = knots.copy()
    edges[..., -1] += 1e-6
    idx = np.sum(x[..., None] >= edges, axis=-1) - 1
    return np.clip(idx, 0, k - 1)


def _pick(t: Tensor, idx: np.ndarray) -> Tensor:
    n, m = idx.shape
    return ad.take_along_axis(t, idx[..., None], axis=-1).reshape(n, m)


def rqs(x, uw, uh, ud, *, inverse: bool = False, tail_bound: float = 10.0,
        min_bin_width: float = 1e-3, min_bin_height: float = 1e-3,
        min_derivative: float = 1e-3):
    """Monotone rational-quadratic spline with linear (identity) tails.

    ``x`` is ``(n, m)``; ``uw``/``uh`` are unnormalised bin widths/heights
    ``(n, m, K)``; ``ud`` the unnormalised interior knot derivatives
    ``(n, m, K-1)``.  Returns ``(y, logabsdet)`` each ``(n, m)``.  With
    ``inverse=True`` the inverse map and its log-derivative are returned.
    """
    x, uw, uh, ud = (ad.as_tensor(t) for t in (x, uw, uh, ud))
    n, m = x.shape
    k = uw.shape[-1]
    if uh.shape[-1] != k or ud.shape[-1] != k - 1:
        raise ad.ShapeError("spline needs K widths, K heights and K-1 derivatives")
    if k * min_bin_width >= 1.0 or k * min_bin_height >= 1.0:
        raise ValueError("minimum bin size too large for the number of bins")
    B = float(tail_bound)
    inside = (x.data >= -B) & (x.data <= B)
    xin = ad.where(inside, x, np.zeros((n, m)))

    cw, widths = _knots(uw, min_bin_width, B)
    ch, heights = _knots(uh, min_bin_height, B)
    shift = _derivative_shift(min_derivative)
    d_int = (ud + shift).softplus() + min_derivative
    ones = np.ones((n, m, 1))
    derivs = ad.concat([ones, d_int, ones], axis=-1)

    idx = _search(ch.data if inverse else cw.data, xin.data)
    x_k, w_k = _pick(cw, idx), _pick(widths, idx)
    y_k, h_k = _pick(ch, idx), _pick(heights, idx)
    d_k, d_k1 = _pick(derivs, idx), _pick(derivs[..., 1:], idx)
    delta = h_k / w_k
    dsum = d_k + d_k1 - 2.0 * delta

    if not inverse:
        theta = (xin - x_k) / w_k
        t1mt = theta * (1.0 - theta)
        num = h_k * (delta * theta.square() + d_k * t1mt)
        den = delta + dsum * t1mt
        out = y_k + num / den
        dnum = delta.square() * (d_k1 * theta.square() + 2.0 * delta * t1mt + d_k * (1.0 - theta).square())
        lad = dnum.log() - 2.0 * den.log()
    else:
        dy = xin - y_k
        a = h_k * (delta - d_k) + dy * dsum
        b = h_k * d_k - dy * dsum
        c = -delta * dy
        disc = b.square() - 4.0 * a * c
        disc = ad.where(disc.data > 0, disc, np.zeros((n, m)))
        root = (2.0 * c) / (-b - disc.sqrt())
        out = root * w_k + x_k
        t1mt = root * (1.0 - root)
        den = delta + dsum * t1mt
        dnum = delta.square() * (d_k1 * root.square() + 2.0 * delta * t1mt + d_k * (1.0 - root).square())
        lad = -(dnum.log() - 2.0 * den.log())

    y = ad.where(inside, out, x)
    logdet = ad.where(inside, lad, np.zeros((n, m)))
    return y, logdet


@dataclass
class RQSpline:
    """Unnormalised parameters of one scalar spline."""

    widths: np.ndarray
    heights: np.ndarray
    derivatives: np.ndarray
    tail_bound: float = 10.0

    @classmethod
    def identity(cls, bins: int = 11, tail_bound: float = 10.0) -> "RQSpline":
        return cls(np.zeros(bins), np.zeros(bins), np.zeros(bins - 1), tail_bound)

    @classmethod
    def random(cls, rng: np.random.Generator, bins: int = 11, tail_bound: float = 10.0,
               scale: float = 1.0) -> "RQSpline":
        return cls(rng.normal(0, scale, bins), rng.normal(0, scale, bins),
                   rng.normal(0, scale, bins - 1), tail_bound)

    def _apply(self, x, inverse: bool):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(1, -1)
        n = flat.shape[1]
        tile = lambda a: np.broadcast_to(a, (1, n, a.size))
        y, lad = rqs(flat, tile(self.widths), tile(self.heights), tile(self.derivatives),
                     inverse=inverse, tail_bound=self.tail_bound)
        return y.data.reshape(x.shape), lad.data.reshape(x.shape)


def rqs_forward(x, spline: RQSpline):
    """``(y, log dy/dx)`` for a scalar or array ``x``."""
    y, lad = spline._apply(x, inverse=False)
    return (float(y), float(lad)) if np.ndim(x) == 0 else (y, lad)


def rqs_inverse(y, spline: RQSpline):
    """``(x, log dx/dy)``: the inverse of :func:`rqs_forward`."""
    x, lad = spline._apply(y, inverse=True)
    return (float(x), float(lad)) if np.ndim(y) == 0 else (x, lad)


# ---------------------------------------------------------------------------
# coupling flow


def _linear_init(rng, fan_in, fan_out):
    if fan_in == 0:
        return np.zeros((0, fan_out))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class NeuralSplineFlow:
    """Spline coupling flow over ``dim`` coordinates.

    Even layers transform the trailing ``dim // 2`` coordinates conditioned
    on the leading ``ceil(dim / 2)``; odd layers swap the roles.  Conditioner
    output layers start at zero, so a fresh flow is the identity map.
    """

    dim: int
    cfg: FlowConfig = field(default_factory=FlowConfig)
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, dim: int, cfg: FlowConfig | None = None,
               rng: np.random.Generator | None = None) -> "NeuralSplineFlow":
        cfg = cfg or FlowConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        flow = cls(dim, cfg)
        H, per = cfg.hidden_features, 3 * cfg.bins - 1
        for l in range(cfg.coupling_layers):
            (i0, i1), (t0, t1) = flow.split(l)
            din, m = i1 - i0, t1 - t0
            p = flow.params
            p[f"c{l}.in.w"] = _linear_init(rng, din, H)
            p[f"c{l}.in.b"] = np.zeros(H)
            for r in range(cfg.residual_blocks):
                p[f"c{l}.r{r}.0.w"] = _linear_init(rng, H, H)
                p[f"c{l}.r{r}.0.b"] = np.zeros(H)
                p[f"c{l}.r{r}.1.w"] = rng.uniform(-1e-3, 1e-3, size=(H, H))
                p[f"c{l}.r{r}.1.b"] = np.zeros(H)
            p[f"c{l}.out.w"] = np.zeros((H, m * per))
            p[f"c{l}.out.b"] = np.zeros(m * per)
        return flow

    def split(self, layer: int):
        """``((id_start, id_stop), (tr_start, tr_stop))`` for a coupling layer."""
        h = (self.dim + 1) // 2
        if layer % 2 == 0:
            return (0, h), (h, self.dim)
        return (h, self.dim), (0, h)

    def randomize(self, rng: np.random.Generator, scale: float = 0.5) -> "NeuralSplineFlow":
        """Copy with every parameter perturbed; gives non-trivial splines for tests."""
        params = {}
        for k, v in self.params.items():
            fan_in = v.shape[0] if v.ndim == 2 else 1
            params[k] = v + rng.normal(0.0, scale / math.sqrt(max(fan_in, 1)), v.shape)
        return NeuralSplineFlow(self.dim, self.cfg, params)

    # -- internals ----------------------------------------------------------

    def _conditioner(self, w, l: int, h: Tensor) -> Tensor:
        h = h @ w[f"c{l}.in.w"] + w[f"c{l}.in.b"]
        for r in range(self.cfg.residual_blocks):
            t = h.relu() @ w[f"c{l}.r{r}.0.w"] + w[f"c{l}.r{r}.0.b"]
            t = t.relu() @ w[f"c{l}.r{r}.1.w"] + w[f"c{l}.r{r}.1.b"]
            h = h + t
        return h @ w[f"c{l}.out.w"] + w[f"c{l}.out.b"]

    def _coupling(self, w, l: int, x: Tensor, inverse: bool):
        cfg = self.cfg
        (i0, i1), (t0, t1) = self.split(l)
        n = x.shape[0]
        m = t1 - t0
        if m == 0:
            return x, None
        ident, trans = x[:, i0:i1], x[:, t0:t1]
        raw = self._conditioner(w, l, ident).reshape(n, m, 3 * cfg.bins - 1)
        K = cfg.bins
        scale = 1.0 / math.sqrt(cfg.hidden_features)
        uw, uh, ud = raw[..., :K] * scale, raw[..., K:2 * K] * scale, raw[..., 2 * K:]
        y, lad = rqs(trans, uw, uh, ud, inverse=inverse, tail_bound=cfg.tail_bound,
                     min_bin_width=cfg.min_bin_width, min_bin_height=cfg.min_bin_height,
                     min_derivative=cfg.min_derivative)
        parts = [ident, y] if i0 == 0 else [y, ident]
        return ad.concat(parts, axis=1), lad.sum(axis=1)

    def _weights(self, weights):
        return self.params if weights is None else weights

    # -- public API ---------------------------------------------------------

    def forward(self, z, weights=None):
        """Push base noise through the flow: ``(theta, sum log|det J_f|)``."""
        w = self._weights(weights)
        x = ad.as_tensor(z)
        total = Tensor(np.zeros(x.shape[0]))
        for l in range(self.cfg.coupling_layers):
            x, lad = self._coupling(w, l, x, inverse=False)
            if lad is not None:
                total = total + lad
        return x, total

    def inverse(self, theta, weights=None):
        """``(z, sum log|det J_{f^-1}|)``."""
        w = self._weights(weights)
        x = ad.as_tensor(theta)
        total = Tensor(np.zeros(x.shape[0]))
        for l in reversed(range(self.cfg.coupling_layers)):
            x, lad = self._coupling(w, l, x, inverse=True)
            if lad is not None:
                total = total + lad
        return x, total

    def log_prob(self, theta, weights=None) -> Tensor:
        z, lad = self.inverse(theta, weights)
        return base_log_prob(z) + lad

    def sample(self, n: int, rng: np.random.Generator, weights=None, z: np.ndarray | None = None):
        """Draw ``n`` samples; returns ``(theta, log q(theta))``.

        ``z`` fixes the base noise (reparameterisation with frozen noise).
        """
        if z is None:
            if n < 1:
                raise ValueError("n must be >= 1")
            z = rng.standard_normal((n, self.dim))
        theta, lad = self.forward(z, weights)
        return theta, base_log_prob(z) - lad

    def entropy_estimate(self, n: int, rng: np.random.Generator) -> float:
        """Monte Carlo estimate ``-mean log q`` over ``n`` fresh samples."""
        total, done = 0.0, 0
        while done < n:
            k = min(4096, n - done)
            _, logq = self.sample(k, rng)
            total += float(logq.data.sum())
            done += k
        return -total / n


def base_log_prob(z) -> Tensor:
    z = ad.as_tensor(z)
    d = z.shape[-1]
    return z.square().sum(axis=-1) * -0.5 - 0.5 * d * LOG_2PI


def flow_log_prob(flow: NeuralSplineFlow, theta) -> Tensor:
    return flow.log_prob(theta)


def flow_sample(flow: NeuralSplineFlow, n: int, rng: np.random.Generator):
    return flow.sample(n, rng)


def entropy_estimate(flow: NeuralSplineFlow, n: int, rng: np.random.Generator) -> float:
    return flow.entropy_estimate(n, rng)
