"""Hybrid CNN + VQC classifier, its classical twin, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from ._validation import check_images, check_labels
from .dataset import LabeledDataset
from .quantum import VqcArchitecture, vqc_layer

log = logging.getLogger(__name__)

HEAD_KINDS = ("quantum", "classical_fc")


@dataclass(frozen=True)
class ModelArch:
    """DeskCNN body plus a quantum or fully connected bottleneck head."""

    image_shape: tuple = (3, 16, 16)
    n_classes: int = 10
    n_qubits: int = 4
    n_layers: int = 2
    head_kind: str = "quantum"
    channels: tuple = (8, 16)

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        c, h, w = self.image_shape
        if c != 3 or h % 4 or w % 4:
            raise ValueError(f"image shape must be [3, H, W] with H, W divisible by 4, got {self.image_shape}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        VqcArchitecture(self.n_qubits, self.n_layers)

    @property
    def vqc(self) -> VqcArchitecture:
        return VqcArchitecture(self.n_qubits, self.n_layers)

    @property
    def flat_features(self) -> int:
        _, h, w = self.image_shape
        return self.channels[1] * (h // 4) * (w // 4)

    def param_shapes(self) -> dict:
        c1, c2 = self.channels
        nq = self.n_qubits
        shapes = {
            "conv1.w": (c1, 3, 3, 3), "conv1.b": (c1,),
            "conv2.w": (c2, c1, 3, 3), "conv2.b": (c2,),
            "fc.w": (nq, self.flat_features), "fc.b": (nq,),
        }
        if self.head_kind == "quantum":
            shapes["vqc.theta"] = (self.n_layers, nq)
        else:
            shapes["mix.w"] = (nq, nq)
            shapes["mix.b"] = (nq,)
        shapes["head.w"] = (self.n_classes, nq)
        shapes["head.b"] = (self.n_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["channels"] = list(self.channels)
        return d


def _fan_in(shape) -> int:
    return int(np.prod(shape[1:]))


class HybridModel:
    """Parameters and forward pass of ``head(f_Q(f_C(x)))``.

    ``f_C`` is conv-relu-pool-conv-relu-pool-linear down to ``n_qubits``
    features. The quantum head runs the VQC and reads out ``<Z>``; the
    classical twin swaps the VQC for a tanh-activated square FC layer.
    """

    def __init__(self, arch: ModelArch, params: dict):
        self.arch = arch
        expected = arch.param_shapes()
        if list(params) != list(expected):
            raise ValueError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise T.DimensionError("HybridModel", name, shape, params[name].shape)
        self.params = params

    @classmethod
    def initialize(cls, arch: ModelArch, seed: int = 0) -> "HybridModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.param_shapes().items():
            if name == "vqc.theta":
                data = rng.uniform(-np.pi, np.pi, size=shape)
            elif name.endswith(".w"):
                bound = np.sqrt(6.0 / _fan_in(shape))
                data = rng.uniform(-bound, bound, size=shape)
            else:
                data = np.zeros(shape)
            params[name] = T.Tensor(data, requires_grad=True, name=name)
        return cls(arch, params)

    def parameters(self) -> list:
        return list(self.params.values())

    def clone(self) -> "HybridModel":
        return HybridModel(self.arch, {k: T.Tensor(v.data.copy(), requires_grad=True, name=k)
                                       for k, v in self.params.items()})

    def twin(self, head_kind: str, seed: int = 0) -> "HybridModel":
        """Model of the other head kind sharing a copy of this model's CNN body."""
        arch = ModelArch(**{**self.arch.to_dict(), "head_kind": head_kind})
        other = HybridModel.initialize(arch, seed)
        for name in ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b"):
            other.params[name].data = self.params[name].data.copy()
        return other

    # -------------------------------------------------------------- forward

    def forward(self, x, keep: dict | None = None) -> T.Tensor:
        """Logits [N, K] (or [K] for one image). Intermediates go into ``keep``."""
        p = self.params
        x = T.as_tensor(x)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1:] != self.arch.image_shape:
            raise T.DimensionError("forward", "image", self.arch.image_shape, x.shape[1:])
        a1 = T.relu(T.conv2d(x, p["conv1.w"], p["conv1.b"], padding=1))
        h1 = T.max_pool2(a1)
        a2 = T.relu(T.conv2d(h1, p["conv2.w"], p["conv2.b"], padding=1))
        h2 = T.max_pool2(a2)
        flat = T.reshape(h2, (h2.shape[0], -1))
        feats = T.linear(flat, p["fc.w"], p["fc.b"])
        if self.arch.head_kind == "quantum":
            emb = vqc_layer(feats, p["vqc.theta"], self.arch.vqc)
        else:
            emb = T.tanh(T.linear(feats, p["mix.w"], p["mix.b"]))
        logits = T.linear(emb, p["head.w"], p["head.b"])
        if keep is not None:
            keep.update(conv1=a1, conv2=a2, features=feats, embedding=emb, logits=logits)
        if single:
            logits = T.reshape(logits, (logits.shape[1],))
        return logits

    def _batched(self, X, key: str, batch_size: int = 512) -> np.ndarray:
        X = check_images(X, allow_single=True)
        out = []
        for start in range(0, len(X), batch_size):
            keep: dict = {}
            self.forward(X[start:start + batch_size], keep)
            out.append(keep[key].data)
        return np.concatenate(out, axis=0)

    def decision_function(self, X) -> np.ndarray:
        return self._batched(X, "logits")

    def embed(self, X) -> np.ndarray:
        """Head input features: ``<Z>`` expectations, or the FC twin's activations."""
        return self._batched(X, "embedding")

    def predict_proba(self, X) -> np.ndarray:
        return T.softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximal index, i.e. the lowest class on ties
        return self.decision_function(X).argmax(axis=1)

    def grad_norms(self, X, y) -> dict:
        """Per-parameter gradient L2 norms of the mean loss on (X, y)."""
        X = check_images(X)
        with T.GradientTape() as tape:
            loss = T.softmax_cross_entropy(self.forward(X), y)
        grads = T.backward(tape, loss, self.parameters())
        return {name: float(np.linalg.norm(grads[t])) for name, t in self.params.items()}


# ---------------------------------------------------------------- training

class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 5e-3
    optimizer: str = "adam"
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def train(model: HybridModel, dataset: LabeledDataset, cfg: TrainConfig, optim: T.OptimState | None = None):
    """Minimise mean cross-entropy over the (possibly poisoned) dataset in place.

    Returns ``(model, per-epoch mean losses)``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.image_shape != model.arch.image_shape:
        raise T.DimensionError("train", "image", model.arch.image_shape, dataset.image_shape)
    rng = np.random.default_rng(cfg.seed)
    state = optim or T.OptimState(learning_rate=cfg.learning_rate, method=cfg.optimizer)
    params = model.parameters()
    n = len(dataset)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with T.GradientTape() as tape:
                loss = T.softmax_cross_entropy(model.forward(dataset.images[idx]), dataset.labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = T.backward(tape, loss, params)
            T.optimizer_step(params, [grads[p] for p in params], state)
            total += value * len(idx)
        trace.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, trace[-1])
    model.optim_state = state
    return model, trace


class HybridClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around :class:`HybridModel` and :func:`train`.

    ``X`` is an image array [N, 3, H, W] with pixels in [0, 1].
    """

    def __init__(self, n_qubits=4, n_layers=2, head="quantum", epochs=8, batch_size=64,
                 learning_rate=5e-3, optimizer="adam", shuffle=True, n_classes=None, random_state=0):
        self.n_qubits = n_qubits
        self.n_layers = n_layers
        self.head = head
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.shuffle = shuffle
        self.n_classes = n_classes
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.optimizer,
                           int(self.random_state), self.shuffle)

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        n_classes = int(self.n_classes) if self.n_classes is not None else int(y.max()) + 1
        if y.max() >= n_classes:
            raise ValueError(f"labels exceed n_classes={n_classes}")
        self.classes_ = np.arange(n_classes)
        arch = ModelArch(X.shape[1:], n_classes, self.n_qubits, self.n_layers, self.head)
        self.model_ = HybridModel.initialize(arch, int(self.random_state))
        _, self.loss_curve_ = train(self.model_, LabeledDataset(X, y, n_classes=n_classes), self._train_config())
        return self

    @classmethod
    def from_model(cls, model: HybridModel, **params) -> "HybridClassifier":
        a = model.arch
        est = cls(n_qubits=a.n_qubits, n_layers=a.n_layers, head=a.head_kind, n_classes=a.n_classes, **params)
        est.model_ = model
        est.classes_ = np.arange(a.n_classes)
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(X)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.model_.predict(X)]
