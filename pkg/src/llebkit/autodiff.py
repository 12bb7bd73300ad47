"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs take part in
differentiation while it is the active tape::

    with Tape() as tape:
        loss = (w @ x).relu().sum()
    grads = tape.backward(loss, [w])

Outside of a tape, operations run eagerly and record nothing.  A tape can be
consumed by exactly one backward pass.

Binary elementwise operations only broadcast over *leading* dimensions (or
against a 0-d scalar); any other shape coercion must go through
:func:`broadcast_to` or :meth:`Tensor.reshape`.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GraphError",
    "as_tensor",
    "broadcast_to",
    "concat",
    "where",
    "take_along_axis",
    "cumsum",
    "im2col",
    "maxpool2d",
    "softmax",
    "log_softmax",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Misuse of a computation graph (non-scalar root, reused tape, ...)."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("kind", "parents", "backward")

    def __init__(self, kind: str, parents: tuple[int, ...], backward: Callable | None):
        self.kind = kind
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of one forward pass.

    Node ids are list positions, so parents always precede their children.
    """

    def __init__(self):
        self.nodes: list[_Node] | None = []
        self._leaves: dict[int, tuple[int, Tensor]] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def _leaf_id(self, t: "Tensor") -> int:
        entry = self._leaves.get(id(t))
        if entry is None:
            self.nodes.append(_Node("leaf", (), None))
            entry = (len(self.nodes) - 1, t)
            self._leaves[id(t)] = entry
        return entry[0]

    def _node_of(self, t: "Tensor") -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad and t._tape is None:
            return self._leaf_id(t)
        return None

    def backward(self, root: "Tensor", wrt: Iterable["Tensor"]) -> dict["Tensor", np.ndarray]:
        """Return ``{tensor: d root / d tensor}`` for every tensor in ``wrt``.

        Tensors that ``root`` does not depend on receive a zero gradient.
        """
        if self.nodes is None:
            raise GraphError("backward already ran on this tape")
        if root.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
        wrt = list(wrt)
        nodes = self.nodes
        self.nodes = None  # one pass per tape

        grads: list[np.ndarray | None] = [None] * len(nodes)
        if root._tape is self:
            grads[root._node] = np.ones(root.shape)
            for i in range(root._node, -1, -1):
                g = grads[i]
                node = nodes[i]
                if g is None or node.backward is None:
                    continue
                for pid, pg in zip(node.parents, node.backward(g)):
                    if pg is None:
                        continue
                    if grads[pid] is None:
                        grads[pid] = pg
                    else:
                        grads[pid] = grads[pid] + pg
        out = {}
        for t in wrt:
            entry = self._leaves.get(id(t))
            g = grads[entry[0]] if entry is not None else None
            out[t] = np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        self._leaves = {}
        return out


def _check_finite(arr: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{kind} produced a non-finite value")
    return arr


def _record(kind: str, out: np.ndarray, inputs: Sequence["Tensor"], backward: Callable) -> "Tensor":
    """Wrap ``out`` in a Tensor, recording it on the active tape if needed.

    ``backward(g)`` maps the output gradient to one gradient per input (or
    None for inputs that are constants).
    """
    _check_finite(out, kind)
    result = Tensor(out)
    tape = _active_tape()
    if tape is None or tape.nodes is None:
        return result
    ids = [tape._node_of(t) for t in inputs]
    if all(i is None for i in ids):
        return result
    used = [k for k, i in enumerate(ids) if i is not None]
    parents = tuple(ids[k] for k in used)

    def _bw(g, _used=used):
        gs = backward(g)
        return [gs[k] for k in _used]

    tape.nodes.append(_Node(kind, parents, _bw))
    result._tape = tape
    result._node = len(tape.nodes) - 1
    return result


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _leading_broadcast(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} differ beyond leading batch dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Immutable dense float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "_tape", "_node", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise binary -------------------------------------------------

    def _binary(self, other, kind, fwd, bwd):
        other = as_tensor(other)
        shape = _leading_broadcast(self.shape, other.shape)
        a, b = self.data, other.data
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = fwd(a, b)
        sa, sb = self.shape, other.shape

        def backward(g):
            ga, gb = bwd(g, a, b, out)
            return (None if ga is None else _unbroadcast(ga, sa),
                    None if gb is None else _unbroadcast(gb, sb))

        assert out.shape == shape
        return _record(kind, out, (self, other), backward)

    def __add__(self, other):
        return self._binary(other, "add", np.add, lambda g, a, b, o: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, "sub", np.subtract, lambda g, a, b, o: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, "mul", np.multiply, lambda g, a, b, o: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        if np.any(other.data == 0):
            raise ZeroDivisionError("division by zero")
        return self._binary(other, "div", np.divide,
                            lambda g, a, b, o: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        return _record("neg", -self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out = self.data[idx]
        shape = self.shape

        basic = _is_basic_index(idx)

        def backward(g):
            full = np.zeros(shape)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return _record("slice", np.array(out, dtype=np.float64), (self,), backward)

    # -- unary ------------------------------------------------------------

    def relu(self):
        x = self.data
        # subgradient at exactly 0 is 0
        return _record("relu", np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),))

    def exp(self):
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return _record("exp", out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        if np.any(x <= 0):
            raise ValueError("log of non-positive value")
        return _record("log", np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        x = self.data
        if np.any(x < 0):
            raise ValueError("sqrt of negative value")
        out = np.sqrt(x)
        return _record("sqrt", out, (self,), lambda g: (g * 0.5 / out,))

    def softplus(self):
        x = self.data
        out = np.logaddexp(0.0, x)
        return _record("softplus", out, (self,), lambda g: (g * _sigmoid(x),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return _record("sigmoid", out, (self,), lambda g: (g * out * (1.0 - out),))

    def square(self):
        x = self.data
        return _record("square", x * x, (self,), lambda g: (2.0 * g * x,))

    # -- reductions and shape ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = np.sum(self.data, axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _record("sum", np.asarray(out), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def logsumexp(self, axis=-1, keepdims: bool = False):
        x = self.data
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - m)
        s = np.sum(e, axis=axis, keepdims=True)
        out_k = m + np.log(s)
        out = out_k if keepdims else np.squeeze(out_k, axis=axis)
        soft = e / s

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * soft,)

        return _record("logsumexp", out, (self,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(str(e)) from None
        return _record("reshape", out, (self,), lambda g: (g.reshape(old),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must agree, or one operand must be plain 2-D.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _record("matmul", out, (a, b), backward)


def broadcast_to(t, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)
    old = t.shape
    try:
        out = np.broadcast_to(t.data, shape).copy()
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _record("broadcast", out, (t,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, splits, axis=axis)

    return _record("concat", out, tensors, backward)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``.  ``cond`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = _leading_broadcast(a.shape, b.shape)
    if cond.shape != shape:
        raise ShapeError(f"condition shape {cond.shape} does not match {shape}")
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("where", out, (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


def take_along_axis(t, indices, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take_along_axis(t.data, indices, axis=axis)
    shape = t.shape
    ax = axis % t.ndim

    def backward(g):
        full = np.zeros(shape)
        grid = list(np.indices(indices.shape, sparse=True))
        grid[ax] = indices
        np.add.at(full, tuple(grid), g)
        return (full,)

    return _record("gather", out, (t,), backward)


def cumsum(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    out = np.cumsum(t.data, axis=axis)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record("cumsum", out, (t,), backward)


def softmax(t, axis: int = -1) -> Tensor:
    return log_softmax(t, axis).exp()


def log_softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    return t - broadcast_to(t.logsumexp(axis=axis, keepdims=True), t.shape)


def im2col(x, k: int) -> Tensor:
    """Extract ``k``x``k`` patches from an NHWC batch (stride 1, no padding).

    Returns shape ``(N, OH, OW, k*k*C)`` with patch entries ordered (di, dj, c).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("im2col expects an NHWC tensor")
    n, h, w, c = x.shape
    oh, ow = h - k + 1, w - k + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {k} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(1, 2))
    # win: (N, OH, OW, C, k, k) -> (N, OH, OW, k, k, C)
    out = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, oh, ow, k * k * c)

    def backward(g):
        g = g.reshape(n, oh, ow, k, k, c)
        full = np.zeros((n, h, w, c))
        for di in range(k):
            for dj in range(k):
                full[:, di:di + oh, dj:dj + ow, :] += g[:, :, :, di, dj, :]
        return (full,)

    return _record("im2col", out, (x,), backward)


def maxpool2d(x, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling on NHWC input (``k == stride``)."""
    x = as_tensor(x)
    if k != stride:
        raise ShapeError("only non-overlapping pooling (kernel == stride) is supported")
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"pool size {k} does not divide input {h}x{w}")
    blocks = x.data.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // k, w // k, c, k * k)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return _record("maxpool2d", out, (x,), backward)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x``
    and central finite differences.

    The error per coordinate is ``|g_tape - g_fd| / max(1, |g_fd|)``.  Only
    ``coords`` (flat indices) are probed when given.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    g = tape.backward(y, [xt])[xt].ravel()
    flat = x0.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += sgn * step
            v = float(f(Tensor(xp.reshape(x0.shape))).data)
            if not np.isfinite(v):
                raise FloatingPointError(f"f is non-finite at probe {i}")
            vals.append(v)
        num = (vals[0] - vals[1]) / (2.0 * step)
        worst = max(worst, abs(g[i] - num) / max(1.0, abs(num)))
    return worst
