"""Input checks shared by the estimators and free functions."""

import numpy as np


def check_images(X, *, name="X", allow_single=False) -> np.ndarray:
    """Return ``X`` as a float64 array of shape [N, 3, H, W] with pixels in [0, 1]."""
    arr = np.asarray(X, dtype=np.float64)
    if allow_single and arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape [N, C, H, W], got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if arr.shape[1] != 3:
        raise ValueError(f"{name} must have 3 channels, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite pixels")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} pixels must lie in [0, 1]")
    return arr


def check_labels(y, n_samples: int, n_classes: int | None = None, *, name="y") -> np.ndarray:
    labels = np.asarray(y)
    if labels.ndim != 1 or len(labels) != n_samples:
        raise ValueError(f"{name} must be 1-d with {n_samples} entries, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError(f"{name} must hold integer class labels")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or (n_classes is not None and labels.max() >= n_classes):
        raise ValueError(f"{name} has labels outside [0, {n_classes})")
    return labels


def check_unit_interval(value: float, name: str, *, open_low=False, open_high=False) -> float:
    v = float(value)
    low_ok = v > 0 if open_low else v >= 0
    high_ok = v < 1 if open_high else v <= 1
    if not (low_ok and high_ok and np.isfinite(v)):
        lo = "(" if open_low else "["
        hi = ")" if open_high else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value}")
    return v
