"""Dataset readers, checkpoints, experiment configs and result files."""

from __future__ import annotations

import csv
import gzip
import json
import os
import struct
import tempfile
from io import StringIO
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import LabeledDataset, make_digits, make_synthetic, split
from .model import HybridModel, ModelArch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class FormatError(ValueError):
    """Malformed input file; the message names the file and the offending position."""


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------- image resampling

def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped, no antialiasing
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(images, height: int, width: int) -> np.ndarray:
    """Bilinear resampling of the last two axes to ``height x width``."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError("bilinear_resize needs at least two axes")
    if x.shape[-2:] == (height, width):
        return x.copy()
    ry = _resize_matrix(x.shape[-2], height)
    rx = _resize_matrix(x.shape[-1], width)
    return np.einsum("ih,...hw,jw->...ij", ry, x, rx)


# ---------------------------------------------------------------- raw formats

def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Unsigned-byte IDX array (big-endian header) from a plain or gzipped file."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} (only unsigned-byte data is supported)")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim == 0 or len(data) < header:
        raise FormatError(f"{path}: truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) != header + count:
        raise FormatError(f"{path}: payload has {len(data) - header} bytes, dimensions {dims} need {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def read_cifar10_bin(path) -> tuple:
    """``(images uint8 [N, 3, 32, 32], labels int64 [N])`` from one CIFAR-10 batch file."""
    data = _read_bytes(path)
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(data)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        raise FormatError(f"{path}: record {bad[0]} has label {labels[bad[0]]} outside [0, 9]")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


# ---------------------------------------------------------------- dataset sources

DATASET_KINDS = ("cifar10_bin", "mnist_idx", "synthetic", "digits")
CIFAR_TRAIN = tuple(f"data_batch_{k}.bin" for k in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class DatasetSource:
    """Where images come from and how they are brought to ``3 x size x size``.

    ``synthetic`` and ``digits`` need no files and exist for offline runs.
    """

    kind: str
    path: str = ""
    size: int = 16
    colorize: bool = True
    n_train: int = 0  # 0 keeps every sample
    n_test: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.size < 4 or self.size % 4:
            raise ValueError("image size must be a positive multiple of 4")


def _find(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / f"{name}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{directory}: missing {name}")


def _to_unit(raw: np.ndarray, src: DatasetSource, grayscale: bool) -> np.ndarray:
    x = raw.astype(np.float64) / 255.0
    if grayscale:
        if not src.colorize:
            raise ValueError("grayscale images need colorize=true to obtain 3 channels")
        x = x[:, None]
    x = np.clip(bilinear_resize(x, src.size, src.size), 0.0, 1.0)
    if grayscale:
        x = np.repeat(x, 3, axis=1)
    return x


def _limit(ds: LabeledDataset, n: int) -> LabeledDataset:
    return ds.head(n) if n else ds


def load_dataset(src: DatasetSource) -> tuple:
    """``(train, test)`` in file order, pixels in [0, 1], shape ``[N, 3, size, size]``."""
    if src.kind == "cifar10_bin":
        d = Path(src.path)
        parts = {}
        for which, names in (("train", CIFAR_TRAIN), ("test", CIFAR_TEST)):
            imgs, labels = [], []
            for n in names:
                raw, lab = read_cifar10_bin(_find(d, n))
                imgs.append(_to_unit(raw, src, False))  # per file, to bound peak memory
                labels.append(lab)
            parts[which] = LabeledDataset(np.concatenate(imgs), np.concatenate(labels))
        train, test = parts["train"], parts["test"]
    elif src.kind == "mnist_idx":
        d = Path(src.path)
        out = []
        for which in ("train", "test"):
            img_name, lab_name = MNIST_FILES[which]
            img_path, lab_path = _find(d, img_name), _find(d, lab_name)
            imgs = read_idx(img_path, IDX_IMAGES_MAGIC)
            labels = read_idx(lab_path, IDX_LABELS_MAGIC).astype(np.int64)
            if len(imgs) != len(labels):
                raise FormatError(f"{lab_path}: {len(labels)} labels for {len(imgs)} images")
            bad = np.flatnonzero(labels > 9)
            if len(bad):
                raise FormatError(f"{lab_path}: item {bad[0]} has label {labels[bad[0]]} outside [0, 9]")
            out.append(LabeledDataset(_to_unit(imgs, src, True), labels))
        train, test = out
    elif src.kind == "synthetic":
        n_train = src.n_train or 5000
        n_test = src.n_test or 1000
        both = make_synthetic(n_train + n_test, src.size, seed=src.seed)
        return split(both, n_train)
    else:
        train, test = split(make_digits(src.size, seed=src.seed), 1437)
    return _limit(train, src.n_train), _limit(test, src.n_test)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"QBCKPT01"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def save_checkpoint(model: HybridModel, optim: T.OptimState | None, meta: dict | None, path, rng=None) -> None:
    """Write ``model``, optimizer state and metadata in the QBCKPT01 format.

    Layout: 8-byte magic, little-endian uint32 version, uint64 header length,
    a canonical JSON header (architecture, tensor table, optimizer
    hyper-parameters, metadata), then every tensor as little-endian float64.
    Passing ``rng`` stores its bit-generator state under ``meta["rng_state"]``.
    """
    meta = dict(meta or {})
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    tensors = [(name, t.data) for name, t in model.params.items()]
    optim_hdr = None
    if optim is not None:
        optim_hdr = dict(learning_rate=optim.learning_rate, method=optim.method, beta1=optim.beta1,
                         beta2=optim.beta2, eps=optim.eps, step_count=optim.step_count,
                         n_moments=len(optim.m))
        tensors += [(f"optim.m.{i}", np.asarray(a)) for i, a in enumerate(optim.m)]
        tensors += [(f"optim.v.{i}", np.asarray(a)) for i, a in enumerate(optim.v)]
    table, offset = [], 0
    for name, arr in tensors:
        table.append(dict(name=name, shape=list(arr.shape), offset=offset))
        offset += arr.size * 8
    header = _json_bytes(dict(arch=model.arch.to_dict(), tensors=table, payload_bytes=offset,
                              optimizer=optim_hdr, meta=meta))
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors)
    _atomic_write(path, _CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + payload)


def _read_header(path, data: bytes) -> tuple:
    if len(data) < _CKPT_PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint prefix")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    end = _CKPT_PREFIX.size + hlen
    if len(data) < end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_CKPT_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, end


def checkpoint_header(path) -> dict:
    """Header of a checkpoint (shapes, optimizer settings, metadata) without the tensors."""
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_CKPT_PREFIX.size)
        if len(prefix) < _CKPT_PREFIX.size:
            raise CheckpointError(f"{path}: truncated checkpoint prefix")
        _, _, hlen = _CKPT_PREFIX.unpack(prefix)
        return _read_header(path, prefix + fh.read(hlen))[0]


def load_checkpoint(path) -> tuple:
    """``(model, optim, meta)``; raises :class:`CheckpointError` on any inconsistency."""
    path = Path(path)
    data = path.read_bytes()
    header, start = _read_header(path, data)
    payload = data[start:]
    expected = header["payload_bytes"]
    sizes = sum(int(np.prod(t["shape"], dtype=np.int64)) * 8 for t in header["tensors"])
    if sizes != expected:
        raise CheckpointError(f"{path}: shape table describes {sizes} bytes, header says {expected}")
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).astype(np.float64)
    arch = ModelArch(**header["arch"])
    try:
        params = {name: T.Tensor(arrays[name], requires_grad=True, name=name) for name in arch.param_shapes()}
        model = HybridModel(arch, params)
    except (KeyError, T.DimensionError, ValueError) as exc:
        raise CheckpointError(f"{path}: tensors do not match the architecture ({exc})") from None
    optim = None
    oh = header["optimizer"]
    if oh is not None:
        k = oh.pop("n_moments")
        optim = T.OptimState(**oh)
        optim.m = [arrays[f"optim.m.{i}"] for i in range(k)]
        optim.v = [arrays[f"optim.v.{i}"] for i in range(k)]
    return model, optim, header["meta"]


def restore_rng(meta: dict) -> np.random.Generator:
    state = meta["rng_state"]
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


# ---------------------------------------------------------------- experiment config

def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _choice(*opts):
    def check(v):
        if v not in opts:
            raise ValueError(f"must be one of {', '.join(opts)}")
    return check


def _range(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(v):
        for x in (v if isinstance(v, tuple) else (v,)):
            if lo is not None and (x < lo or (lo_open and x == lo)):
                raise ValueError(f"must be {'>' if lo_open else '>='} {lo}")
            if hi is not None and (x > hi or (hi_open and x == hi)):
                raise ValueError(f"must be {'<' if hi_open else '<='} {hi}")
    return check


def _length(n):
    def check(v):
        if len(v) != n:
            raise ValueError(f"needs exactly {n} comma-separated values")
    return check


REQUIRED = object()

# key: (parser, default, validator, description). This table is the single
# source of config defaults; the README mirrors it.
CONFIG_SCHEMA = {
    "seed": (int, 0, _range(0), "master seed"),
    "runs.n_seeds": (int, 1, _range(1), "sweep and compare-heads repeat over seed, seed+1, ..."),
    "dataset.kind": (str, REQUIRED, _choice(*DATASET_KINDS), "image source"),
    "dataset.path": (str, "data/cifar-10-batches-bin", None, "directory holding the dataset files"),
    "dataset.size": (int, 16, _range(4), "images are resized to size x size"),
    "dataset.colorize": (_bool, True, None, "replicate grayscale into three channels"),
    "dataset.n_train": (int, 0, _range(0), "keep the first n training samples (0 = all)"),
    "dataset.n_test": (int, 0, _range(0), "keep the first n test samples (0 = all)"),
    "model.head": (str, "quantum", _choice("quantum", "classical_fc"), "bottleneck head"),
    "model.qubits": (int, 4, _range(1, 14), "VQC width"),
    "model.layers": (int, 2, _range(1), "VQC depth"),
    "trigger.kind": (str, "qcolor", _choice("qcolor", "patch", "blend", "colorshift"), "trigger family"),
    "trigger.ratios": (_floats, (0.9, 1.0, 1.0), lambda v: (_length(3)(v), _range(0.5, 1.5)(v)), "Qcolor ratios"),
    "trigger.patch_size": (int, 3, _range(1), "patch side in pixels"),
    "trigger.blend_alpha": (float, 0.05, _range(0, 1), "blend weight of the noise pattern"),
    "trigger.shift": (_floats, (0.1, 0.0, 0.0), _length(3), "per-channel additive shift"),
    "poison.rate": (float, 0.1, _range(0, 1, lo_open=True), "poisoned fraction of the training set"),
    "poison.target": (int, 0, _range(0, 9), "target label"),
    "train.epochs": (int, 8, _range(1), "training epochs"),
    "train.batch_size": (int, 64, _range(1), "minibatch size"),
    "train.lr": (float, 5e-3, _range(0), "learning rate"),
    "train.optimizer": (str, "adam", _choice("adam", "sgd"), "optimizer"),
    "nsga.population": (int, 20, _range(4), "population size (even)"),
    "nsga.generations": (int, 10, _range(1), "generations"),
    "nsga.eta_c": (float, 15.0, _range(0), "SBX distribution index"),
    "nsga.sigma_m": (float, 0.05, _range(0), "Gaussian mutation scale"),
    "nsga.mutation_prob": (float, 1.0 / 3.0, _range(0, 1), "per-gene mutation probability"),
    "nsga.surrogate_epochs": (int, 2, _range(1), "epochs of each fitness training run"),
    "nsga.surrogate_train": (int, 2000, _range(1), "training samples per fitness run"),
    "nsga.probe": (int, 32, _range(1), "SSIM probe images"),
    "nsga.n_jobs": (int, 1, _range(1), "parallel fitness evaluations"),
    "strip.n_overlays": (int, 100, _range(1), "blends per input"),
    "strip.alpha": (float, 0.5, _range(0, 1, lo_open=True, hi_open=True), "overlay weight"),
    "strip.percentile": (float, 1.0, _range(0, 100), "clean-entropy percentile used as threshold"),
    "strip.n_samples": (int, 200, _range(1), "clean and suspect inputs scored"),
    "cleanse.steps": (int, 400, _range(1), "optimisation steps per class"),
    "cleanse.lr": (float, 0.1, _range(0, lo_open=True), "mask/pattern learning rate"),
    "cleanse.lambda": (float, 1e-3, _range(0), "initial mask-sparsity weight"),
    "cleanse.batch": (int, 32, _range(1), "images per step"),
    "cleanse.n_samples": (int, 500, _range(1), "clean images available to the optimiser"),
    "cleanse.keep_best": (_bool, True, None, "report the sparsest successful mask rather than the last one"),
    "prune.rates": (_floats, tuple(round(0.1 * k, 1) for k in range(1, 10)), _range(0, 1, True, True), "pruning rates"),
    "prune.n_samples": (int, 500, _range(1), "clean images used to rank channels"),
    "sweep.patch_sizes": (_ints, (1, 4, 9, 16), _range(1), "patch sizes of the sweep"),
    "sweep.rates": (_floats, (0.1,), _range(0, 1, lo_open=True), "poison rates of the sweep"),
    "bounds.B": (float, 1.0, _range(0, lo_open=True), "loss bound"),
    "bounds.conf_delta": (float, 0.05, _range(0, 1, True, True), "Hoeffding confidence"),
    "bounds.n_pairs": (int, 200, _range(1), "pairs sampled for the Lipschitz estimate"),
    "bounds.radius": (float, 1e-3, _range(0, lo_open=True), "perturbation radius of those pairs"),
    "gradcheck.h": (float, 1e-5, _range(0, lo_open=True), "finite-difference step"),
    "gradcheck.tol": (float, 1e-3, _range(0, lo_open=True), "maximum allowed relative error"),
    "output.dir": (str, "runs/out", None, "default output directory"),
}


class ConfigError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def to_text(self) -> str:
        """Canonical ``key = value`` echo; parsing it yields an equal config."""
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values))

    def with_overrides(self, overrides) -> "ExperimentConfig":
        return parse_config("\n".join(overrides), base=self, origin="--set")


def _parse_value(key: str, text: str, line: int):
    parser, _, check, _ = CONFIG_SCHEMA[key]
    try:
        value = parser(text)
    except ValueError:
        raise ConfigError(line, f"{key}: cannot parse {text!r} as {getattr(parser, '__name__', 'value').lstrip('_')}") from None
    if check is not None:
        try:
            check(value)
        except ValueError as exc:
            raise ConfigError(line, f"{key} = {text}: {exc}") from None
    return value


def parse_config(text: str, base: ExperimentConfig | None = None, origin: str = "config") -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Errors carry line numbers.

    Keys missing from ``text`` come from ``base`` if given, else from the
    defaults in :data:`CONFIG_SCHEMA`; required keys must be set somewhere.
    """
    values = dict(base.values) if base is not None else {}
    lines = text.splitlines()
    seen = set()
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(no, f"expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(no, f"unknown key {key!r}")
        if key in seen and origin == "config":
            raise ConfigError(no, f"duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse_value(key, val, no)
    for key, (_, default, _, _) in CONFIG_SCHEMA.items():
        if key in values:
            continue
        if default is REQUIRED:
            raise ConfigError(len(lines) + 1, f"missing required key {key!r}")
        values[key] = default
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        return parse_config(path.read_text())
    except ConfigError as exc:
        raise ConfigError(exc.line, f"{path}: {str(exc).split(': ', 1)[1]}") from None


def schema_table() -> str:
    """Markdown table of every config key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for key, (_, default, _, doc) in CONFIG_SCHEMA.items():
        d = "(required)" if default is REQUIRED else _format_value(default)
        rows.append(f"| `{key}` | `{d}` | {doc} |")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- results and dumps

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_results(rows, path, columns=None) -> None:
    """CSV with a header in stable column order; floats keep 17 significant digits.

    Written to a temporary file and renamed into place, so readers never see a
    partial file and reruns overwrite atomically.
    """
    rows = [dict(r) for r in rows]
    if columns is None:
        if not rows:
            raise ValueError("columns are required when writing an empty result set")
        columns = list(rows[0])
    columns = list(columns)
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        missing = [c for c in columns if c not in r]
        if missing:
            raise ValueError(f"row lacks columns {missing}")
        writer.writerow([_cell(r[c]) for c in columns])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def read_results(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


RAW_MAGIC = b"QBRAW001"


def write_raw_images(images, path) -> None:
    """Planar float dump: magic, uint32 ndim, uint32 dims, little-endian float64 data."""
    x = np.ascontiguousarray(images, dtype="<f8")
    head = RAW_MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape)
    _atomic_write(path, head + x.tobytes())


def read_raw_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != RAW_MAGIC or len(data) < 12:
        raise FormatError(f"{path}: not a raw image dump")
    ndim = struct.unpack_from("<I", data, 8)[0]
    start = 12 + 4 * ndim
    if len(data) < start:
        raise FormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", data, 12)
    n = int(np.prod(shape, dtype=np.int64))
    if len(data) - start != 8 * n:
        raise FormatError(f"{path}: payload does not match shape {shape}")
    return np.frombuffer(data, dtype="<f8", offset=start).reshape(shape).astype(np.float64)


def write_ppm(image, path, scale: int = 1) -> None:
    """8-bit binary PPM preview of one [3, H, W] image, optionally upscaled."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError("write_ppm expects a [3, H, W] image")
    px = np.round(np.clip(x, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    px = np.repeat(np.repeat(px, scale, axis=0), scale, axis=1)
    h, w, _ = px.shape
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + px.tobytes())
