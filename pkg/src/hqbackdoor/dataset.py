"""In-memory labelled image sets and the built-in synthetic sources."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_images, check_labels


@dataclass
class LabeledDataset:
    """Images [N, 3, H, W] in [0, 1], integer labels and a poisoned-sample mask."""

    images: np.ndarray
    labels: np.ndarray
    poison_mask: np.ndarray = field(default=None)
    n_classes: int = 10
    source_index: np.ndarray = field(default=None)  # row of each sample in the set it was derived from

    def __post_init__(self):
        self.images = check_images(self.images, name="images")
        self.labels = check_labels(self.labels, len(self.images), self.n_classes, name="labels")
        if self.poison_mask is None:
            self.poison_mask = np.zeros(len(self.labels), dtype=bool)
        self.poison_mask = np.asarray(self.poison_mask, dtype=bool)
        if self.poison_mask.shape != self.labels.shape:
            raise ValueError("poison_mask must match labels in length")
        if self.source_index is None:
            self.source_index = np.arange(len(self.labels))
        self.source_index = np.asarray(self.source_index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.poison_mask[index], self.n_classes,
                              self.source_index[index])

    def head(self, n: int) -> "LabeledDataset":
        return self.subset(np.arange(min(n, len(self))))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(self.poison_mask.tobytes())
        return h.hexdigest()


def split(ds: LabeledDataset, n_first: int, seed: int | None = None):
    """Split into two parts, optionally after a seeded permutation."""
    order = np.arange(len(ds)) if seed is None else np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[:n_first]), ds.subset(order[n_first:])


# ---------------------------------------------------------------- synthetic shapes

def _shape_masks(size: int) -> list:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    r = np.hypot(yy - c, xx - c)
    s = size / 16
    masks = [
        (np.abs(yy - c) < 2.0 * s),                        # horizontal bar
        (np.abs(xx - c) < 2.0 * s),                        # vertical bar
        (np.abs(yy - xx) < 2.0 * s),                       # diagonal
        (np.abs(yy + xx - 2 * c) < 2.0 * s),               # anti-diagonal
        (r < 4.5 * s),                                     # disc
        (np.abs(r - 5.0 * s) < 1.3 * s),                   # ring
        ((np.abs(yy - c) < 1.6 * s) | (np.abs(xx - c) < 1.6 * s)),  # cross
        ((np.abs(yy - c) < 5 * s) & (np.abs(xx - c) < 5 * s) & ~((np.abs(yy - c) < 3 * s) & (np.abs(xx - c) < 3 * s))),
        ((yy > 3 * s) & (np.abs(xx - c) < (yy - 3 * s) * 0.6)),    # triangle
        (((yy // (4 * s)) + (xx // (4 * s))) % 2 == 0),    # checker
    ]
    return [m.astype(np.float64) for m in masks]


def make_synthetic(n_samples: int, size: int = 16, n_classes: int = 10, seed: int = 0) -> LabeledDataset:
    """Coloured geometric shapes on coloured backgrounds; class = shape.

    Foreground and background colours are drawn independently per image, so
    colour carries no label information; samples are class-balanced.
    """
    if n_classes > 10:
        raise ValueError("the synthetic source has at most 10 classes")
    rng = np.random.default_rng(seed)
    masks = _shape_masks(size)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    fg = rng.uniform(0.15, 0.95, size=(n_samples, 3))
    bg = rng.uniform(0.05, 0.85, size=(n_samples, 3))
    shifts = rng.integers(-2, 3, size=(n_samples, 2))
    images = np.empty((n_samples, 3, size, size))
    for i in range(n_samples):
        m = np.roll(masks[labels[i]], tuple(shifts[i]), axis=(0, 1))
        images[i] = fg[i][:, None, None] * m + bg[i][:, None, None] * (1 - m)
    images += rng.normal(0.0, 0.04, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledDataset(images, labels, n_classes=n_classes)


def make_digits(size: int = 16, seed: int | None = 0) -> LabeledDataset:
    """The bundled 8x8 handwritten digits, colourised by channel replication."""
    from sklearn.datasets import load_digits

    from .io import bilinear_resize

    bunch = load_digits()
    gray = bunch.images / 16.0
    up = bilinear_resize(gray[:, None], size, size)
    images = np.repeat(np.clip(up, 0.0, 1.0), 3, axis=1)
    ds = LabeledDataset(images, bunch.target, n_classes=10)
    if seed is not None:
        ds = ds.subset(np.random.default_rng(seed).permutation(len(ds)))
    return ds
