"""Generalisation lower bound, Hoeffding tails and concentration-of-measure estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundInputs:
    """Constants of the backdoor generalisation bound.

    ``conf_delta`` is the Hoeffding confidence level and ``trig_delta`` the
    trigger strength; they are separate quantities.
    """

    B: float
    m: int
    conf_delta: float
    L_t: float = 0.0
    trig_delta: float = 0.0
    z_norm: float = 0.0

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError("B must be positive")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be an integer >= 1")
        if not 0 < self.conf_delta < 1:
            raise ValueError(f"conf_delta must lie strictly inside (0, 1), got {self.conf_delta}")
        for name in ("L_t", "trig_delta", "z_norm"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")


def hoeffding_term(inp: BoundInputs) -> float:
    return inp.B / math.sqrt(2 * inp.m) * math.sqrt(math.log(2 / inp.conf_delta))


def generalization_lower_bound(inp: BoundInputs, train_err: float) -> float:
    """``train_err - B/sqrt(2m) * sqrt(ln(2/conf_delta)) + L_t * trig_delta * z_norm``."""
    if not train_err >= 0:
        raise ValueError("train_err must be non-negative")
    return train_err - hoeffding_term(inp) + inp.L_t * inp.trig_delta * inp.z_norm


def hoeffding_tail(m: int, B: float, eps: float) -> float:
    """Two-sided Hoeffding bound ``2 exp(-2 m eps^2 / B^2)``."""
    if m < 1 or not B > 0 or eps < 0:
        raise ValueError("need m >= 1, B > 0 and eps >= 0")
    return 2.0 * math.exp(-2.0 * m * eps * eps / (B * B))


def bounds_report(inp: BoundInputs, train_err: float) -> list:
    """Rows ``(quantity, value, inputs...)`` for the bounds CSV."""
    common = dict(B=inp.B, m=inp.m, conf_delta=inp.conf_delta, L_t=inp.L_t,
                  trig_delta=inp.trig_delta, z_norm=inp.z_norm, train_err=train_err)
    return [
        dict(quantity="hoeffding_term", value=hoeffding_term(inp), **common),
        dict(quantity="lipschitz_term", value=inp.L_t * inp.trig_delta * inp.z_norm, **common),
        dict(quantity="generalization_lower_bound", value=generalization_lower_bound(inp, train_err), **common),
    ]


# ---------------------------------------------------------------- Lipschitz

def _cross_entropy(probs: np.ndarray, y: int) -> np.ndarray:
    return -np.log(np.clip(probs[:, y], 1e-300, None))


def estimate_lipschitz(model, X, n_pairs: int, y_fixed: int, *, loss=None, radius: float = 1e-3,
                       seed: int = 0) -> float:
    """Largest sampled loss slope ``|L(f(x'), y) - L(f(x), y)| / ||x' - x||``.

    This is an empirical lower estimate of the Lipschitz constant, never a
    certificate. ``model`` is either a callable ``f(X)`` or an object with
    ``predict_proba``; ``loss(outputs, y)`` returns per-sample losses and
    defaults to cross-entropy on probabilities. Pairs are drawn one after
    another from a single stream, so a smaller ``n_pairs`` is always a prefix
    of a larger one.
    """
    X = np.asarray(getattr(X, "images", X), dtype=np.float64)
    if len(X) < 2:
        raise ValueError("estimate_lipschitz needs at least two samples")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    f = model if callable(model) and not hasattr(model, "predict_proba") else model.predict_proba
    loss = loss or _cross_entropy
    rng = np.random.default_rng(seed)
    idx = np.empty(n_pairs, dtype=np.int64)
    deltas = np.empty((n_pairs,) + X.shape[1:])
    for k in range(n_pairs):
        idx[k] = rng.integers(len(X))
        while True:
            d = rng.normal(size=X.shape[1:])
            norm = np.linalg.norm(d)
            if norm > 0:
                break
        deltas[k] = d * (radius / norm)
    base = X[idx]
    moved = base + deltas
    if base.ndim == 4:
        # keep image pairs inside the valid pixel range
        moved = np.clip(moved, 0.0, 1.0)
    dist = np.linalg.norm((moved - base).reshape(n_pairs, -1), axis=1)
    ok = dist > 0
    if not ok.any():
        raise ValueError("every sampled pair had zero distance")
    diff = np.abs(np.asarray(loss(f(moved), y_fixed)) - np.asarray(loss(f(base), y_fixed)))
    return float(np.max(diff[ok] / dist[ok]))


# ---------------------------------------------------------------- COMP

@dataclass
class CompEstimate:
    epsilons: np.ndarray
    tail_fractions: np.ndarray
    c_values: np.ndarray
    feature_mean: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.tail_fractions) > 0):
            raise ValueError("tail fractions must be non-increasing in epsilon")


def estimate_comp(features, eps_grid) -> CompEstimate:
    """Empirical tail ``mu(||phi - E phi|| >= eps)`` and ``c(eps) = -ln`` of it."""
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.ndim != 2 or len(phi) < 30:
        raise ValueError("estimate_comp needs at least 30 feature vectors")
    eps = np.asarray(eps_grid, dtype=np.float64)
    if eps.ndim != 1 or len(eps) == 0:
        raise ValueError("eps_grid must be a non-empty 1-d sequence")
    if np.any(eps < 0) or np.any(np.diff(eps) <= 0):
        raise ValueError("eps_grid must be ascending and non-negative")
    mean = phi.mean(axis=0)
    dev = np.linalg.norm(phi - mean, axis=1)
    tails = np.array([np.mean(dev >= e) for e in eps])
    with np.errstate(divide="ignore"):
        c = np.where(tails > 0, -np.log(np.where(tails > 0, tails, 1.0)), np.inf)
    return CompEstimate(eps, tails, c + 0.0, mean)


def min_perturbation(comp: CompEstimate, c_query: float) -> float:
    """Smallest ``eps`` with ``c(eps) = c_query`` on the piecewise-linear curve.

    Only finite c-values are used and nothing is extrapolated: a query outside
    their range raises ``ValueError``.
    """
    finite = np.isfinite(comp.c_values)
    eps = comp.epsilons[finite]
    c = comp.c_values[finite]
    if len(c) == 0:
        raise ValueError("no finite c-values to invert")
    if not c[0] <= c_query <= c[-1]:
        raise ValueError(f"c-value {c_query} outside the invertible range [{c[0]}, {c[-1]}]")
    k = int(np.searchsorted(c, c_query, side="left"))
    if c[k] == c_query:
        return float(eps[k])
    c0, c1 = c[k - 1], c[k]
    return float(eps[k - 1] + (c_query - c0) * (eps[k] - eps[k - 1]) / (c1 - c0))
