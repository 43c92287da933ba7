"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are recorded on the innermost active :class:`GradientTape` whenever
one of their inputs is tracked (a watched leaf or the output of a recorded op).
Most ops accept either a single sample (``[C, H, W]``, ``[N]``, ``[K]``) or a
leading batch axis; batched losses are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "TapeError",
    "Tensor",
    "GradientTape",
    "OptimState",
    "backward",
    "optimizer_step",
    "add",
    "sub",
    "mul",
    "neg",
    "sum",
    "mean",
    "reshape",
    "relu",
    "sigmoid",
    "tanh",
    "linear",
    "conv2d",
    "max_pool2",
    "softmax",
    "softmax_cross_entropy",
]


class DimensionError(ValueError):
    """Raised when operand shapes disagree; names the offending axis."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension mismatch on axis '{axis}' (expected {expected}, got {got})")


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array that can take part in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._recorded

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _raise_not_scalar(shape):
    raise TapeError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class _Node:
    output: Tensor
    parents: tuple
    backward_fn: object


_ACTIVE_TAPES: list["GradientTape"] = []


class GradientTape:
    """Ordered record of operations; use as a context manager.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradientTape() as tape:
    ...     loss = sum(mul(w, w))
    >>> backward(tape, loss, [w])[w]
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}
        self._used = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def record(self, output: Tensor, parents, backward_fn) -> None:
        output._recorded = True
        self._index[id(output)] = len(self.nodes)
        self.nodes.append(_Node(output, tuple(parents), backward_fn))

    def gradient(self, loss: Tensor, sources) -> dict:
        return backward(self, loss, sources)


def _record(output: Tensor, parents, backward_fn) -> Tensor:
    if _ACTIVE_TAPES and any(p.tracked for p in parents):
        _ACTIVE_TAPES[-1].record(output, parents, backward_fn)
    return output


def backward(tape: GradientTape, loss: Tensor, wrt) -> dict:
    """Gradients of scalar ``loss`` for every tensor in ``wrt``.

    Returns a dict keyed by tensor identity. Tensors that never influenced
    ``loss`` get exact zeros.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise TapeError("tape already consumed by a backward pass")
    tape._used = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for pos in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[pos]
        g = grads.get(id(node.output))
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.tracked:
                continue
            if tape._index.get(id(parent), -1) >= pos:
                raise TapeError("cyclic tape: a parent was recorded after its child")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for t in wrt:
        g = grads.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    return out


# ---------------------------------------------------------------- elementwise

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = Tensor(np.sum(a.data))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(np.sum(a.data) / n)
    return _record(out, (a,), lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t)
    return _record(out, (a,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------- layers

def linear(x, weights, bias) -> Tensor:
    """``out[i] = sum_j W[i, j] * x[j] + b[i]``; ``x`` may carry a batch axis."""
    x, w, b = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if w.ndim != 2:
        raise DimensionError("linear", "weights", "2-d", w.shape)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError("linear", "in_features", w.shape[1], x.shape[-1])
    if b.shape != (w.shape[0],):
        raise DimensionError("linear", "out_features", w.shape[0], b.shape)
    single = x.ndim == 1
    xd = x.data[None, :] if single else x.data
    y = xd @ w.data.T + b.data
    out = Tensor(y[0] if single else y)

    def back(g):
        g2 = g[None, :] if single else g
        gx = g2 @ w.data
        return (gx[0] if single else gx), g2.T @ xd, g2.sum(axis=0)

    return _record(out, (x, w, b), back)


def conv2d(x, kernels, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernels`` [Co,Ci,k,k]."""
    x, w, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError("conv2d", "input rank", "3 or 4", x.ndim)
    if w.ndim != 4:
        raise DimensionError("conv2d", "kernel rank", 4, w.ndim)
    n, c, h, wd = xd.shape
    co, ci, k, k2 = w.shape
    if ci != c:
        raise DimensionError("conv2d", "in_channels", ci, c)
    if k != k2:
        raise DimensionError("conv2d", "kernel_width", k, k2)
    if b.shape != (co,):
        raise DimensionError("conv2d", "out_channels", co, b.shape)
    if k > h + 2 * padding:
        raise DimensionError("conv2d", "height", f">= {k - 2 * padding}", h)
    if k > wd + 2 * padding:
        raise DimensionError("conv2d", "width", f">= {k - 2 * padding}", wd)
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    y = y + b.data[None, :, None, None]
    out = Tensor(y[0] if single else y)

    def back(g):
        g4 = g[None] if single else g
        gb = g4.sum(axis=(0, 2, 3))
        gw = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g4, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return (gx[0] if single else gx), gw, gb

    return _record(out, (x, w, b), back)


def max_pool2(x) -> Tensor:
    """2x2 non-overlapping max pooling; ties go to the first cell in row-major order."""
    x = as_tensor(x)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if h % 2:
        raise DimensionError("max_pool2", "height", "even", h)
    if w % 2:
        raise DimensionError("max_pool2", "width", "even", w)
    blocks = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y[0] if single else y)

    def back(g):
        g4 = g[None] if single else g
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if single else gx),

    return _record(out, (x,), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z.shape[1]
    if y.shape != (z.shape[0],):
        raise DimensionError("softmax_cross_entropy", "batch", z.shape[0], y.shape)
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(len(y)), y] - logsum
    n = len(y)
    out = Tensor(-np.sum(logp) / n)

    def back(g):
        grad = softmax(z)
        grad[np.arange(n), y] -= 1.0
        grad *= float(g) / n
        return (grad[0] if single else grad),

    return _record(out, (logits,), back)


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimState:
    """Optimizer hyper-parameters and moment buffers (aligned with a param list)."""

    learning_rate: float = 1e-3
    method: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")


def optimizer_step(params, grads, state: OptimState) -> None:
    """Update ``params`` (list of Tensors) in place from aligned ``grads``."""
    if len(params) != len(grads):
        raise DimensionError("optimizer_step", "param count", len(params), len(grads))
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionError("optimizer_step", p.name or "param", p.shape, np.shape(g))
    lr = state.learning_rate
    state.step_count += 1
    if state.method == "sgd":
        for p, g in zip(params, grads):
            p.data = p.data - lr * g
        return
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
