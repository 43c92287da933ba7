"""Trigger families and training-set poisoning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_images, check_unit_interval
from .dataset import LabeledDataset

QCOLOR_BOX = (0.5, 1.5)
CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


@dataclass(frozen=True)
class Qcolor:
    """Multiplicative per-channel colour ratios."""

    r1: float = 1.0
    r2: float = 1.0
    r3: float = 1.0

    def __post_init__(self):
        lo, hi = QCOLOR_BOX
        for v in self.ratios:
            if not lo <= v <= hi:
                raise ValueError(f"Qcolor ratios must lie in [{lo}, {hi}], got {self.ratios}")

    @property
    def ratios(self) -> tuple:
        return (self.r1, self.r2, self.r3)

    def label(self) -> str:
        return "qcolor(%g,%g,%g)" % self.ratios


@dataclass(frozen=True)
class Patch:
    size: int = 3
    color: tuple = (1.0, 1.0, 1.0)
    pos: str = "bottom-right"

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise ValueError(f"patch size must be a positive integer, got {self.size}")
        if self.pos not in CORNERS:
            raise ValueError(f"patch position must be one of {CORNERS}")
        if len(self.color) != 3 or min(self.color) < 0 or max(self.color) > 1:
            raise ValueError("patch colour must be an RGB triple in [0, 1]")

    def label(self) -> str:
        return f"patch({self.size})"


@dataclass(frozen=True, eq=False)
class Blend:
    alpha: float
    pattern: np.ndarray = field(repr=False)

    def __post_init__(self):
        check_unit_interval(self.alpha, "blend alpha")
        pat = np.asarray(self.pattern, dtype=np.float64)
        if pat.ndim != 3 or pat.shape[0] != 3:
            raise ValueError("blend pattern must have shape [3, H, W]")
        if pat.min() < 0 or pat.max() > 1:
            raise ValueError("blend pattern pixels must lie in [0, 1]")
        object.__setattr__(self, "pattern", pat)

    @classmethod
    def noise(cls, alpha: float, shape=(3, 16, 16), seed: int = 0) -> "Blend":
        """Blend with a fixed seeded uniform-noise pattern."""
        return cls(alpha, np.random.default_rng(seed).uniform(0.0, 1.0, size=shape))

    def label(self) -> str:
        return f"blend({self.alpha:g})"


@dataclass(frozen=True)
class ColorShift:
    delta: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.delta) != 3:
            raise ValueError("colour shift needs three channel offsets")

    def label(self) -> str:
        return "colorshift(%g,%g,%g)" % tuple(self.delta)


TriggerSpec = Qcolor | Patch | Blend | ColorShift


def _patch_slices(spec: Patch, h: int, w: int):
    s = spec.size
    if s > h or s > w:
        raise ValueError(f"patch of size {s} does not fit a {h}x{w} image")
    rows = slice(h - s, h) if spec.pos.startswith("bottom") else slice(0, s)
    cols = slice(w - s, w) if spec.pos.endswith("right") else slice(0, s)
    return rows, cols


def apply_trigger(images, spec: TriggerSpec) -> np.ndarray:
    """Triggered copy of one image [3, H, W] or a batch [N, 3, H, W]."""
    x = check_images(images, allow_single=True)
    single = np.ndim(images) == 3
    if isinstance(spec, Qcolor):
        out = x * np.asarray(spec.ratios)[None, :, None, None]
    elif isinstance(spec, Patch):
        out = x.copy()
        rows, cols = _patch_slices(spec, x.shape[2], x.shape[3])
        out[:, :, rows, cols] = np.asarray(spec.color)[None, :, None, None]
    elif isinstance(spec, Blend):
        if spec.pattern.shape != x.shape[1:]:
            raise ValueError(f"blend pattern shape {spec.pattern.shape} != image shape {x.shape[1:]}")
        out = (1.0 - spec.alpha) * x + spec.alpha * spec.pattern[None]
    elif isinstance(spec, ColorShift):
        out = x + np.asarray(spec.delta, dtype=np.float64)[None, :, None, None]
    else:
        raise TypeError(f"unknown trigger spec {spec!r}")
    np.clip(out, 0.0, 1.0, out=out)
    return out[0] if single else out


def trigger_strength(spec: TriggerSpec, reference_image) -> float:
    """Euclidean pixel distance between a reference image and its triggered copy."""
    x = np.asarray(reference_image, dtype=np.float64)
    return float(np.linalg.norm(apply_trigger(x, spec) - x))


class TriggerTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer applying a trigger to every image in ``X``."""

    def __init__(self, spec=None):
        self.spec = spec

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X):
        return apply_trigger(X, self.spec if self.spec is not None else Qcolor())


@dataclass(frozen=True)
class PoisonConfig:
    rate: float = 0.1
    target_label: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ValueError(f"poison rate must lie in (0, 1], got {self.rate}")
        if self.target_label < 0:
            raise ValueError("target label must be non-negative")


def poison_count(rate: float, n: int) -> int:
    # guard against float noise such as 0.1 * 1000 = 100.00000000000001
    return int(math.ceil(round(rate * n, 9)))


def poison_dataset(ds: LabeledDataset, spec: TriggerSpec, cfg: PoisonConfig) -> LabeledDataset:
    """Trigger and relabel ``ceil(rate * |ds|)`` non-target samples, then reshuffle."""
    if cfg.target_label >= ds.n_classes:
        raise ValueError(f"target label {cfg.target_label} outside [0, {ds.n_classes})")
    eligible = np.flatnonzero(ds.labels != cfg.target_label)
    if len(eligible) == 0:
        raise ValueError("dataset has no samples outside the target class")
    count = poison_count(cfg.rate, len(ds))
    if count > len(eligible):
        raise ValueError(f"need {count} poisoned samples but only {len(eligible)} non-target samples exist")
    rng = np.random.default_rng(cfg.seed)
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))
    images = ds.images.copy()
    labels = ds.labels.copy()
    mask = ds.poison_mask.copy()
    images[chosen] = apply_trigger(images[chosen], spec)
    labels[chosen] = cfg.target_label
    mask[chosen] = True
    order = rng.permutation(len(ds))
    return LabeledDataset(images[order], labels[order], mask[order], ds.n_classes, ds.source_index[order])
