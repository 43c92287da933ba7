"""STRIP, Neural Cleanse (with the MAD anomaly index) and Fine-Pruning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from ._validation import check_images, check_unit_interval
from .dataset import LabeledDataset
from .metrics import attack_success_rate, clean_accuracy

log = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826


def _unwrap(model):
    return getattr(model, "model_", model)


# ---------------------------------------------------------------- STRIP

@dataclass(frozen=True)
class StripConfig:
    n_overlays: int = 100
    blend_alpha: float = 0.5
    percentile: float = 1.0
    bins: int = 20

    def __post_init__(self):
        if self.n_overlays < 1:
            raise ValueError("n_overlays must be >= 1")
        check_unit_interval(self.blend_alpha, "blend_alpha", open_low=True, open_high=True)
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")


def _entropy(probs: np.ndarray) -> np.ndarray:
    return -np.sum(xlogy(probs, probs), axis=-1)


def strip_entropies(model, images, overlay_pool, cfg: StripConfig = StripConfig(), seed: int = 0) -> np.ndarray:
    """Mean softmax entropy (nats) of each image blended with random pool images."""
    x = check_images(images, allow_single=True)
    pool = np.asarray(overlay_pool, dtype=np.float64)
    if pool.ndim != 4 or len(pool) == 0:
        raise ValueError("overlay pool must be a non-empty [M, 3, H, W] array")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(pool), size=(len(x), cfg.n_overlays))
    a = cfg.blend_alpha
    out = np.empty(len(x))
    chunk = max(1, 2048 // cfg.n_overlays)
    for start in range(0, len(x), chunk):
        xs = x[start:start + chunk]
        blended = (1 - a) * xs[:, None] + a * pool[picks[start:start + chunk]]
        probs = model.predict_proba(blended.reshape((-1,) + x.shape[1:]))
        ent = _entropy(probs).reshape(len(xs), cfg.n_overlays)
        out[start:start + chunk] = ent.mean(axis=1)
    return out


def strip_entropy(model, image, overlay_pool, cfg: StripConfig = StripConfig(), seed: int = 0) -> float:
    return float(strip_entropies(model, np.asarray(image)[None], overlay_pool, cfg, seed)[0])


@dataclass
class StripResult:
    clean_entropy: np.ndarray
    suspect_entropy: np.ndarray
    bin_edges: np.ndarray
    clean_hist: np.ndarray
    suspect_hist: np.ndarray
    threshold: float
    far: float
    frr: float

    def rows(self) -> list:
        rows = [dict(sample_id=i, set="clean", entropy=e) for i, e in enumerate(self.clean_entropy)]
        rows += [dict(sample_id=i, set="suspect", entropy=e) for i, e in enumerate(self.suspect_entropy)]
        return rows


def strip_detect(model, clean_images, suspect_images, overlay_pool, cfg: StripConfig = StripConfig(),
                 seed: int = 0) -> StripResult:
    """Entropy distributions, the clean-percentile threshold, and FAR/FRR.

    Inputs with entropy below the threshold are flagged as trojaned; FRR is
    the flagged fraction of clean inputs and FAR the unflagged fraction of
    suspect inputs.
    """
    clean = strip_entropies(model, clean_images, overlay_pool, cfg, seed)
    suspect = strip_entropies(model, suspect_images, overlay_pool, cfg, seed + 1)
    threshold = float(np.percentile(clean, cfg.percentile))
    lo = min(clean.min(), suspect.min())
    hi = max(clean.max(), suspect.max())
    if hi <= lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, cfg.bins + 1)
    clean_hist, _ = np.histogram(clean, edges)
    suspect_hist, _ = np.histogram(suspect, edges)
    return StripResult(clean, suspect, edges, clean_hist, suspect_hist, threshold,
                       far=float(np.mean(suspect >= threshold)), frr=float(np.mean(clean < threshold)))


class StripDetector(OutlierMixin, BaseEstimator):
    """Flags inputs whose blended predictions stay confidently low-entropy.

    ``fit`` takes clean held-out images, which also serve as the overlay pool.
    ``predict`` returns -1 for flagged (suspected trojaned) inputs and 1 otherwise.
    """

    def __init__(self, model=None, n_overlays=100, blend_alpha=0.5, percentile=1.0, random_state=0):
        self.model = model
        self.n_overlays = n_overlays
        self.blend_alpha = blend_alpha
        self.percentile = percentile
        self.random_state = random_state

    def _cfg(self) -> StripConfig:
        return StripConfig(self.n_overlays, self.blend_alpha, self.percentile)

    def fit(self, X, y=None):
        X = check_images(X)
        self.pool_ = X
        self.train_entropy_ = strip_entropies(self.model, X, X, self._cfg(), self.random_state)
        self.threshold_ = float(np.percentile(self.train_entropy_, self.percentile))
        return self

    def score_samples(self, X):
        check_is_fitted(self, "threshold_")
        return strip_entropies(self.model, X, self.pool_, self._cfg(), self.random_state + 1)

    def decision_function(self, X):
        return self.score_samples(X) - self.threshold_

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)


# ---------------------------------------------------------------- Neural Cleanse

@dataclass(frozen=True)
class CleanseConfig:
    steps: int = 400
    learning_rate: float = 0.1
    lambda_init: float = 1e-3
    batch_size: int = 32
    check_every: int = 10
    raise_above: float = 0.99  # double lambda when reversed-trigger success exceeds this
    lower_below: float = 0.90  # halve lambda below this
    seed: int = 0
    adaptive: bool = True
    keep_best: bool = True  # report the sparsest mask that reached raise_above instead of the final one

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lambda_init < 0:
            raise ValueError("lambda_init must be >= 0")
        if self.batch_size < 1 or self.check_every < 1:
            raise ValueError("batch_size and check_every must be >= 1")


@dataclass
class CleanseResult:
    label: int
    mask: np.ndarray | None
    pattern: np.ndarray | None
    l1: float
    success: float
    failed: bool = False
    lambda_final: float = 0.0
    mask_range: tuple = (0.0, 1.0)  # observed min/max of the mask over all steps
    final_l1: float = float("nan")


def _reverse_one(model, images: np.ndarray, label: int, cfg: CleanseConfig, lr: float) -> CleanseResult:
    rng = np.random.default_rng([cfg.seed, label])
    _, _, h, w = images.shape
    mask_logit = T.Tensor(rng.normal(0.0, 0.1, size=(1, 1, h, w)) - 2.0, requires_grad=True)
    pattern_logit = T.Tensor(rng.normal(0.0, 0.1, size=(1, 3, h, w)), requires_grad=True)
    params = [mask_logit, pattern_logit]
    state = T.OptimState(learning_rate=lr, method="adam", beta1=0.5, beta2=0.9)
    lam = cfg.lambda_init
    n = len(images)
    lo, hi = np.inf, -np.inf
    hits = seen = 0
    success = 0.0
    best = (np.inf, None, None, 0.0)
    for step in range(cfg.steps):
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        x = images[idx]
        with T.GradientTape() as tape:
            m = T.sigmoid(mask_logit)
            p = T.sigmoid(pattern_logit)
            stamped = T.add(T.mul(T.sub(1.0, m), x), T.mul(m, p))
            logits = model.forward(stamped)
            ce = T.softmax_cross_entropy(logits, np.full(len(idx), label))
            loss = T.add(ce, T.mul(lam, T.sum(m)))
        lo, hi = min(lo, m.data.min()), max(hi, m.data.max())
        if not np.isfinite(loss.data):
            return CleanseResult(label, None, None, np.nan, 0.0, failed=True, lambda_final=lam)
        grads = T.backward(tape, loss, params)
        T.optimizer_step(params, [grads[t] for t in params], state)
        hits += int(np.sum(logits.data.argmax(axis=1) == label))
        seen += len(idx)
        if (step + 1) % cfg.check_every == 0:
            success = hits / seen
            hits = seen = 0
            l1 = float(m.data.sum())
            if success >= cfg.raise_above and l1 < best[0]:
                best = (l1, m.data[0, 0].copy(), T.sigmoid(pattern_logit).data[0].copy(), success)
            if cfg.adaptive:
                if success > cfg.raise_above:
                    lam = max(lam, 1e-6) * 2.0
                elif success < cfg.lower_below:
                    lam = lam / 2.0
    mask = 1.0 / (1.0 + np.exp(-mask_logit.data[0, 0]))
    pattern = 1.0 / (1.0 + np.exp(-pattern_logit.data[0]))
    final_l1 = float(mask.sum())
    rng_ = (float(min(lo, mask.min())), float(max(hi, mask.max())))
    if cfg.keep_best and best[1] is not None:
        return CleanseResult(label, best[1], best[2], best[0], best[3], lambda_final=lam, mask_range=rng_,
                             final_l1=final_l1)
    return CleanseResult(label, mask, pattern, final_l1, success, lambda_final=lam, mask_range=rng_,
                         final_l1=final_l1)


def neural_cleanse(model, dataset: LabeledDataset, cfg: CleanseConfig = CleanseConfig(), labels=None) -> list:
    """Reverse-engineer a minimal mask/pattern trigger for every class.

    Gradients flow through the whole model, including the quantum layer via
    the parameter-shift rule.
    """
    model = _unwrap(model)
    if len(dataset) == 0:
        raise ValueError("neural_cleanse needs a non-empty dataset")
    labels = range(model.arch.n_classes) if labels is None else labels
    results = []
    for c in labels:
        res = _reverse_one(model, dataset.images, c, cfg, cfg.learning_rate)
        if res.failed:
            log.warning("class %d: non-finite loss, retrying with a 10x smaller step", c)
            res = _reverse_one(model, dataset.images, c, cfg, cfg.learning_rate / 10)
            if res.failed:
                log.error("class %d: reverse engineering failed", c)
        results.append(res)
    return results


def anomaly_index(l1_norms) -> tuple:
    """MAD-based anomaly index per class and the flagged (small-norm outlier) classes."""
    norms = np.asarray(l1_norms, dtype=np.float64)
    if norms.ndim != 1 or len(norms) < 3:
        raise ValueError("anomaly_index needs at least three norms")
    med = np.median(norms)
    mad = MAD_CONSISTENCY * np.median(np.abs(norms - med))
    if mad == 0:
        return np.zeros_like(norms), []
    index = np.abs(norms - med) / mad
    flagged = [int(i) for i in np.flatnonzero((index > 2) & (norms < med))]
    return index, flagged


# ---------------------------------------------------------------- Fine-Pruning

@dataclass(frozen=True)
class PruneConfig:
    rates: tuple = tuple(round(0.1 * k, 1) for k in range(1, 10))
    layer: str = "conv2"

    def __post_init__(self):
        r = tuple(float(v) for v in self.rates)
        if any(not 0 < v < 1 for v in r):
            raise ValueError("pruning rates must lie in (0, 1)")
        if list(r) != sorted(r):
            raise ValueError("pruning rates must be ascending")
        object.__setattr__(self, "rates", r)


def channel_activity(model, images, layer: str = "conv2", batch_size: int = 512) -> np.ndarray:
    """Mean activation per channel of ``layer`` over ``images``."""
    model = _unwrap(model)
    x = check_images(images)
    total = None
    for start in range(0, len(x), batch_size):
        keep: dict = {}
        model.forward(x[start:start + batch_size], keep)
        s = keep[layer].data.sum(axis=(0, 2, 3))
        total = s if total is None else total + s
    a = keep[layer].data
    return total / (len(x) * a.shape[2] * a.shape[3])


def prune_channels(model, channels, layer: str = "conv2"):
    """Copy of ``model`` with the given output channels of ``layer`` zeroed."""
    pruned = _unwrap(model).clone()
    channels = np.asarray(channels, dtype=np.int64)
    pruned.params[f"{layer}.w"].data[channels] = 0.0
    pruned.params[f"{layer}.b"].data[channels] = 0.0
    return pruned


def fine_prune_sweep(model, clean_subset: LabeledDataset, test: LabeledDataset, spec, target_label: int,
                     cfg: PruneConfig = PruneConfig()) -> list:
    """BA and ASR after pruning the least active channels at every rate.

    Channels are ranked by the L1 norm of their mean activation on
    ``clean_subset``; each rate prunes ``floor(rate * C)`` channels on a copy,
    so ``model`` itself is never modified.
    """
    if len(clean_subset) == 0:
        raise ValueError("fine_prune_sweep needs clean samples")
    base = _unwrap(model)
    activity = np.abs(channel_activity(base, clean_subset.images, cfg.layer))
    order = np.argsort(activity, kind="stable")
    rows = []
    for rate in cfg.rates:
        k = int(np.floor(rate * len(order) + 1e-9))
        pruned = prune_channels(base, order[:k], cfg.layer)
        rows.append(dict(rate=rate, ba=clean_accuracy(pruned, test),
                         asr=attack_success_rate(pruned, test, spec, target_label), pruned=k))
    return rows
