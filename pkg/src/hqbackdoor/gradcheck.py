"""Finite-difference audit of every differentiable op and of the full hybrid model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import HybridModel, ModelArch
from .quantum import VqcArchitecture, vqc_layer

# entries whose analytic and numeric gradients are both below this are
# compared in absolute terms
REL_FLOOR = 1e-6


def relative_error(analytic, numeric) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, REL_FLOOR)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise T.DimensionError("relative_error", "gradient", a.shape, n.shape)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / den))


def numeric_gradient(fn, arrays: list, index: int, h: float) -> np.ndarray:
    """Central differences of scalar ``fn(*arrays)`` with respect to ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(*arrays)
        flat[i] = old - h
        down = fn(*arrays)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_function(build, arrays: list, h: float = 1e-5) -> list:
    """Relative error per input of a taped scalar function.

    ``build(*tensors)`` must return a scalar Tensor built from tape ops.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        return float(build(*[T.Tensor(a) for a in arrs]).data)

    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.GradientTape() as tape:
        out = build(*tensors)
    grads = T.backward(tape, out, tensors)
    return [relative_error(grads[t], numeric_gradient(value, arrays, k, h)) for k, t in enumerate(tensors)]


@dataclass
class GradcheckRow:
    target: str
    input: str
    max_rel_err: float
    passed: bool

    def row(self) -> dict:
        return dict(target=self.target, input=self.input, max_rel_err=self.max_rel_err, passed=self.passed)


def _op_cases(rng) -> list:
    """``(name, build, arrays, input names)`` for each primitive op."""
    w = rng.normal(size=(2, 3, 4))

    proj_cache: dict = {}

    def rng_proj(shape):
        if shape not in proj_cache:
            proj_cache[shape] = rng.normal(size=shape)
        return proj_cache[shape]

    def proj(out):
        # random projection turns any output into a scalar with a generic gradient
        return T.sum(T.mul(out, rng_proj(out.shape)))

    away = rng.uniform(0.2, 1.0, size=(2, 3, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4))
    pool_in = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) / 10.0  # distinct values, no ties
    x_img = rng.normal(size=(2, 2, 5, 5))
    k_img = rng.normal(size=(3, 2, 3, 3))
    b_img = rng.normal(size=3)
    cases = [
        ("add", lambda a, b: proj(T.add(a, b)), [w, rng.normal(size=(3, 4))], ["a", "b(broadcast)"]),
        ("sub", lambda a, b: proj(T.sub(a, b)), [w, rng.normal(size=(1, 4))], ["a", "b(broadcast)"]),
        ("mul", lambda a, b: proj(T.mul(a, b)), [w, rng.normal(size=(2, 3, 4))], ["a", "b"]),
        ("neg", lambda a: proj(T.neg(a)), [w], ["a"]),
        ("sum", lambda a: T.mul(T.sum(a), 1.7), [w], ["a"]),
        ("mean", lambda a: T.mul(T.mean(a), 1.7), [w], ["a"]),
        ("reshape", lambda a: proj(T.reshape(a, (6, 4))), [w], ["a"]),
        ("relu", lambda a: proj(T.relu(a)), [away], ["a"]),
        ("sigmoid", lambda a: proj(T.sigmoid(a)), [w], ["a"]),
        ("tanh", lambda a: proj(T.tanh(a)), [w], ["a"]),
        ("linear", lambda x, W, b: proj(T.linear(x, W, b)),
         [rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)], ["x", "W", "b"]),
        ("conv2d", lambda x, k, b: proj(T.conv2d(x, k, b, padding=1)), [x_img, k_img, b_img], ["x", "kernels", "bias"]),
        ("conv2d_stride2", lambda x, k, b: proj(T.conv2d(x, k, b, stride=2)), [x_img, k_img, b_img],
         ["x", "kernels", "bias"]),
        ("max_pool2", lambda a: proj(T.max_pool2(a)), [pool_in], ["x"]),
        ("softmax_cross_entropy", lambda z: T.softmax_cross_entropy(z, np.array([0, 2, 1, 2])),
         [rng.normal(size=(4, 3))], ["logits"]),
    ]
    arch = VqcArchitecture(3, 2)
    cases.append(("vqc_layer", lambda f, th: proj(vqc_layer(f, th, arch)),
                  [rng.normal(size=(2, 3)), rng.uniform(-np.pi, np.pi, size=(2, 3))], ["features", "theta"]))
    return cases


def _model_rows(head_kind: str, h: float, tol: float, seed: int, n_images: int = 3) -> list:
    arch = ModelArch(head_kind=head_kind)
    model = HybridModel.initialize(arch, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(0.0, 1.0, size=(n_images,) + arch.image_shape)
    y = rng.integers(arch.n_classes, size=n_images)
    names = list(model.params)
    arrays = [model.params[k].data.copy() for k in names] + [x]

    def build(*ts):
        m = HybridModel(arch, {k: t for k, t in zip(names, ts[:-1])})
        return T.softmax_cross_entropy(m.forward(ts[-1]), y)

    errs = check_function(build, arrays, h)
    return [GradcheckRow(f"model[{head_kind}]", n, e, e <= tol) for n, e in zip(names + ["input"], errs)]


def run_gradcheck(h: float = 1e-5, tol: float = 1e-3, seed: int = 0, include_model: bool = True) -> list:
    """Audit rows for every primitive op and, optionally, both full model variants."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, build, arrays, labels in _op_cases(rng):
        for label, err in zip(labels, check_function(build, arrays, h)):
            rows.append(GradcheckRow(name, label, err, err <= tol))
    if include_model:
        for kind in ("quantum", "classical_fc"):
            rows.extend(_model_rows(kind, h, tol, seed))
    return rows
