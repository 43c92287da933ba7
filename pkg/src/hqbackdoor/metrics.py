"""Accuracy, attack success rate, SSIM and Grad-CAM."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attacks import apply_trigger
from .dataset import LabeledDataset


def _predict(model, images) -> np.ndarray:
    return np.asarray(model.predict(images))


def clean_accuracy(model, test: LabeledDataset) -> float:
    """Percentage of correctly classified samples.

    Reported as CA for a clean model and BA for a backdoored one; both go
    through this function.
    """
    if len(test) == 0:
        raise ValueError("clean_accuracy needs a non-empty test set")
    correct = int(np.sum(_predict(model, test.images) == test.labels))
    return 100.0 * correct / len(test)


backdoor_accuracy = clean_accuracy


def asr_eligible(test: LabeledDataset, target_label: int) -> np.ndarray:
    """Indices of test samples whose true label differs from the target."""
    return np.flatnonzero(test.labels != target_label)


def attack_success_rate(model, test: LabeledDataset, spec, target_label: int) -> float:
    """Percentage of triggered non-target samples predicted as ``target_label``."""
    idx = asr_eligible(test, target_label)
    if len(idx) == 0:
        raise ValueError("no test samples outside the target class")
    preds = _predict(model, apply_trigger(test.images[idx], spec))
    return 100.0 * int(np.sum(preds == target_label)) / len(idx)


# ---------------------------------------------------------------- SSIM

@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("SSIM window must be a positive odd size")

    def kernel_1d(self) -> np.ndarray:
        r = np.arange(self.window) - (self.window - 1) / 2
        g = np.exp(-(r ** 2) / (2 * self.sigma ** 2))
        return g / g.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filter over the last two axes."""
    w = len(k)
    rows = np.lib.stride_tricks.sliding_window_view(img, w, axis=-2) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, w, axis=-1) @ k


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-window SSIM values for images [..., C, H, W]; windows lie fully inside."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[-1] < cfg.window or a.shape[-2] < cfg.window:
        raise ValueError(f"ssim: images smaller than the {cfg.window}x{cfg.window} window")
    k = cfg.kernel_1d()
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean windowed SSIM over all windows and channels of two [3, H, W] images."""
    a = np.asarray(a)
    if a.ndim != 3:
        raise ValueError(f"ssim expects [C, H, W] images, got {a.shape}")
    return float(np.mean(ssim_map(a, b, cfg)))


def batch_ssim(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """SSIM per image pair for stacks [N, 3, H, W]."""
    m = ssim_map(a, b, cfg)
    return m.reshape(m.shape[0], -1).mean(axis=1)


def mean_ssim(images, spec, cfg: SsimConfig = SsimConfig()) -> float:
    return float(np.mean(batch_ssim(images, apply_trigger(images, spec), cfg)))


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    model_id: str
    trigger: str
    p: float
    ca: float
    ba: float
    asr: float
    mean_ssim: float
    seed: int
    n_clean: int = 0
    n_asr: int = 0

    COLUMNS = ("model_id", "trigger", "p", "ca", "ba", "asr", "mean_ssim", "seed")

    def __post_init__(self):
        for name in ("ca", "ba", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage, got {v}")

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.COLUMNS}


def evaluate(clean_model, backdoor_model, test: LabeledDataset, spec, target_label: int, *,
             model_id: str = "model", p: float = 0.0, seed: int = 0) -> EvalReport:
    ca = clean_accuracy(clean_model, test)
    ba = clean_accuracy(backdoor_model, test)
    asr = attack_success_rate(backdoor_model, test, spec, target_label)
    idx = asr_eligible(test, target_label)
    label = spec.label() if hasattr(spec, "label") else str(spec)
    return EvalReport(model_id, label, p, ca, ba, asr, mean_ssim(test.images, spec), seed,
                      n_clean=len(test), n_asr=len(idx))


# ---------------------------------------------------------------- Grad-CAM

def grad_cam(model, image, target_class: int, layer: str = "conv2") -> np.ndarray:
    """Class-activation heatmap [H, W] in [0, 1] from the last conv activations.

    ``model`` is a :class:`~hqbackdoor.model.HybridModel` (or anything with a
    compatible ``forward(x, keep)``).
    """
    model = getattr(model, "model_", model)
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("grad_cam expects a single [3, H, W] image")
    keep: dict = {}
    with T.GradientTape() as tape:
        logits = model.forward(x[None], keep)
        k = logits.shape[1]
        if not 0 <= target_class < k:
            raise ValueError(f"target class {target_class} outside [0, {k})")
        score = T.sum(T.mul(logits, np.eye(k)[target_class][None]))
    acts = keep[layer]
    g = T.backward(tape, score, [acts])[acts][0]
    a = acts.data[0]
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    h, w = x.shape[1:]
    cam = np.repeat(np.repeat(cam, h // cam.shape[0], axis=0), w // cam.shape[1], axis=1)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)
