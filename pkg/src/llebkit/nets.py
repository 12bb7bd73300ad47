"""Classifier architectures, cross-entropy, Adam and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .rng import make_rng

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The training objective became non-finite or blew up."""


# ---------------------------------------------------------------------------
# architecture descriptors


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int


@dataclass(frozen=True)
class MaxPool2d:
    kernel_size: int = 2
    stride: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5


@dataclass(frozen=True)
class Dropout2d:
    rate: float = 0.5


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


Layer = Union[Conv2d, MaxPool2d, ReLU, Dropout, Dropout2d, Flatten, Linear]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv2d, MaxPool2d, ReLU, Dropout, Dropout2d, Flatten, Linear)}


@dataclass(frozen=True)
class Architecture:
    """Ordered layers plus the per-example input shape (channels last)."""

    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Linear):
            raise ValueError("architecture must end with a Linear layer")
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    @property
    def head_index(self) -> int:
        return len(self.layers) - 1

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].in_features

    @property
    def split_dim(self) -> int:
        head = self.layers[-1]
        return head.in_features * head.out_features + head.out_features

    @property
    def has_dropout(self) -> bool:
        return any(isinstance(l, (Dropout, Dropout2d)) for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(l).__name__, **l.__dict__} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            layers.append(_LAYER_TYPES[spec.pop("type")](**spec))
        return cls(tuple(d["input_shape"]), tuple(layers))


def _out_shape(layer, shape: tuple, i: int) -> tuple:
    def bad(msg):
        raise ValueError(f"layer {i} ({type(layer).__name__}): {msg}; input shape {shape}")

    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[2] != layer.in_channels:
            bad("expects (H, W, in_channels)")
        h, w = shape[0] - layer.kernel_size + 1, shape[1] - layer.kernel_size + 1
        if h < 1 or w < 1:
            bad("kernel larger than input")
        return (h, w, layer.out_channels)
    if isinstance(layer, MaxPool2d):
        if len(shape) != 3 or shape[0] % layer.stride or shape[1] % layer.stride:
            bad("pool does not tile the input")
        return (shape[0] // layer.stride, shape[1] // layer.stride, shape[2])
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Linear):
        if shape != (layer.in_features,):
            bad(f"expects ({layer.in_features},)")
        return (layer.out_features,)
    if isinstance(layer, Dropout2d) and len(shape) != 3:
        bad("Dropout2d expects (H, W, C)")
    return shape


def mnist_cnn(dropout: float = 0.5) -> Architecture:
    """The small convolutional net used for MNIST / Fashion-MNIST."""
    return Architecture(
        (28, 28, 1),
        (
            Conv2d(1, 10, 5),
            MaxPool2d(2, 2),
            ReLU(),
            Conv2d(10, 20, 5),
            Dropout2d(dropout),
            MaxPool2d(2, 2),
            ReLU(),
            Flatten(),
            Linear(320, 50),
            Linear(50, 10),
        ),
    )


def two_moons_mlp(hidden: int = 64, dropout: float = 0.2) -> Architecture:
    return Architecture(
        (2,),
        (
            Linear(2, hidden),
            ReLU(),
            Linear(hidden, hidden),
            ReLU(),
            Dropout(dropout),
            Linear(hidden, 2),
        ),
    )


ARCHITECTURES = {"mnist_cnn": mnist_cnn, "two_moons_mlp": two_moons_mlp}


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ClassifierParams:
    """Named weights for an architecture.

    Layer ``i`` owns ``"{i}.weight"`` and ``"{i}.bias"``.  Linear weights are
    stored ``(in, out)``; conv kernels ``(k*k*in_channels, out)``.  The final
    linear layer is the last-layer block; everything else is the backbone.
    """

    arch: Architecture
    tensors: dict = field(default_factory=dict)

    @property
    def head_names(self) -> tuple[str, str]:
        i = self.arch.head_index
        return f"{i}.weight", f"{i}.bias"

    @property
    def split_dim(self) -> int:
        return self.arch.split_dim

    def backbone(self) -> dict:
        head = self.head_names
        return {k: v for k, v in self.tensors.items() if k not in head}

    def flatten_last(self) -> np.ndarray:
        w, b = self.head_names
        return np.concatenate([self.tensors[w].ravel(), self.tensors[b].ravel()])

    def with_last(self, vec: np.ndarray) -> "ClassifierParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.split_dim,):
            raise ValueError(f"last-layer vector must have shape ({self.split_dim},)")
        w, b = split_last(vec, self.arch)
        tensors = dict(self.tensors)
        wn, bn = self.head_names
        tensors[wn], tensors[bn] = w, b
        return ClassifierParams(self.arch, tensors)

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


def split_last(vec, arch: Architecture):
    """Split flattened last-layer vectors ``(..., split_dim)`` into (weight, bias)."""
    head = arch.layers[-1]
    nw = head.in_features * head.out_features
    vec = np.asarray(vec)
    lead = vec.shape[:-1]
    return vec[..., :nw].reshape(lead + (head.in_features, head.out_features)), vec[..., nw:]


def init_params(arch: Architecture, rng: np.random.Generator) -> ClassifierParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    tensors = {}
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Linear):
            fan_in, shape, nout = layer.in_features, (layer.in_features, layer.out_features), layer.out_features
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel_size ** 2
            shape, nout = (fan_in, layer.out_channels), layer.out_channels
        else:
            continue
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"{i}.weight"] = rng.uniform(-bound, bound, size=shape)
        tensors[f"{i}.bias"] = np.zeros(nout)
    return ClassifierParams(arch, tensors)


# ---------------------------------------------------------------------------
# forward pass


def _dropout_mask(layer, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    keep = 1.0 - layer.rate
    if keep <= 0.0:
        return np.zeros(shape)
    if isinstance(layer, Dropout2d):
        n, _, _, c = shape
        m = (rng.random((n, 1, 1, c)) < keep) / keep
        return np.broadcast_to(m, shape)
    return (rng.random(shape) < keep) / keep


def features(arch: Architecture, weights: Mapping, x, dropout_active: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Run every layer except the final linear one; returns penultimate features."""
    if dropout_active and rng is None:
        raise ValueError("an rng is required when dropout is active")
    h = ad.as_tensor(x)
    if h.shape[1:] != tuple(arch.input_shape):
        raise ad.ShapeError(f"input shape {h.shape[1:]} does not match architecture {arch.input_shape}")
    for i, layer in enumerate(arch.layers[:-1]):
        if isinstance(layer, Linear):
            h = h @ weights[f"{i}.weight"] + weights[f"{i}.bias"]
        elif isinstance(layer, Conv2d):
            h = ad.im2col(h, layer.kernel_size) @ weights[f"{i}.weight"] + weights[f"{i}.bias"]
        elif isinstance(layer, MaxPool2d):
            h = ad.maxpool2d(h, layer.kernel_size, layer.stride)
        elif isinstance(layer, ReLU):
            h = h.relu()
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, (Dropout, Dropout2d)):
            if dropout_active and layer.rate > 0:
                h = h * _dropout_mask(layer, h.shape, rng)
    return h


def head(feats, weight, bias) -> Tensor:
    """Apply one last layer ``(H, C)`` or a stack of them ``(S, H, C)``.

    With a stack the result is ``(S, N, C)``.
    """
    feats, weight, bias = ad.as_tensor(feats), ad.as_tensor(weight), ad.as_tensor(bias)
    logits = feats @ weight
    if weight.ndim == 3:
        s, c = bias.shape
        bias = ad.broadcast_to(bias.reshape(s, 1, c), logits.shape)
    return logits + bias


def net_forward(params: ClassifierParams, x, dropout_active: bool = False,
                rng: np.random.Generator | None = None, weights: Mapping | None = None) -> Tensor:
    """Logits ``(batch, classes)``.  ``weights`` overrides ``params.tensors``
    (used to pass tape-tracked Tensors during training)."""
    w = params.tensors if weights is None else weights
    feats = features(params.arch, w, x, dropout_active, rng)
    wn, bn = params.head_names
    return head(feats, w[wn], w[bn])


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` may carry extra leading sample axes, ``(..., N, C)``; the mean
    is then over all samples and examples.
    """
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.shape != logits.shape[-2:-1]:
        raise ad.ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    onehot = np.eye(c)[labels]
    picked = (ad.log_softmax(logits) * onehot).sum(axis=-1)
    return -picked.mean()


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    """One Adam update with the L2 term folded into the gradient.

    Returns ``(new_params, state)``; the input arrays are not modified.
    """
    state.t += 1
    t = state.t
    new = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.beta1 * state.m.get(k, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(k, 0.0) + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 1e-5
    clip_norm: float = 0.1


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def optimise(params: dict, loss_fn, n: int, hp: TrainConfig, rng: np.random.Generator,
             what: str = "model") -> tuple[dict, list[float]]:
    """Generic minibatch Adam loop.

    ``loss_fn(weights, batch_idx)`` must return a scalar Tensor built from
    the Tensors in ``weights``.  Aborts with :class:`TrainingDiverged` if the
    epoch loss is non-finite or worsens by more than 10x its initial size.
    """
    state = AdamState(lr=hp.lr, weight_decay=hp.weight_decay)
    trace: list[float] = []
    first = None
    for epoch in range(hp.epochs):
        total, count = 0.0, 0
        for idx in minibatches(n, hp.batch_size, rng):
            wt = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            try:
                with Tape() as tape:
                    loss = loss_fn(wt, idx)
                grads = tape.backward(loss, wt.values())
            except FloatingPointError as e:
                raise TrainingDiverged(f"{what}: {e} at epoch {epoch}") from None
            lv = loss.item()
            if first is None:
                first = lv
            grads = {k: grads[t] for k, t in wt.items()}
            grads = clip_grad_norm(grads, hp.clip_norm)
            params, state = adam_step(state, params, grads)
            total += lv * len(idx)
            count += len(idx)
        epoch_loss = total / count
        trace.append(epoch_loss)
        if not np.isfinite(epoch_loss) or epoch_loss - first > 10 * abs(first) + 1e-12:
            raise TrainingDiverged(f"{what}: loss {epoch_loss!r} at epoch {epoch} (initial {first!r})")
        log.debug("%s epoch %d loss %.6f", what, epoch, epoch_loss)
    return params, trace


def train_classifier(arch: Architecture, data, hp: TrainConfig, seed: int):
    """Maximum-likelihood training; returns ``(ClassifierParams, per-epoch loss)``."""
    if len(data.labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init_params(arch, make_rng(seed, "init"))
    x, y = data.features, data.labels
    drop_rng = make_rng(seed, "dropout")
    proto = ClassifierParams(arch)

    def loss_fn(w, idx):
        logits = net_forward(proto, x[idx], dropout_active=True, rng=drop_rng, weights=w)
        return cross_entropy(logits, y[idx])

    tensors, trace = optimise(params.tensors, loss_fn, len(y), hp, make_rng(seed, "batches"), "classifier")
    return ClassifierParams(arch, tensors), trace


def predict_proba(params: ClassifierParams, x, batch_size: int = 2048) -> np.ndarray:
    """Deterministic softmax probabilities (dropout off)."""
    out = []
    for s in range(0, len(x), batch_size):
        logits = net_forward(params, x[s:s + batch_size]).data
        out.append(softmax_np(logits))
    return np.concatenate(out) if out else np.zeros((0, params.arch.num_classes))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
