"""Statevector simulation of the angle-encoded RY/CNOT variational circuit.

Qubit 0 is the most significant bit of a basis index, so ``|10>`` means qubit 0
is set. The circuit is: Hadamard on every qubit, ``RY((pi/2) tanh f_q)`` per
qubit, then ``n_layers`` blocks of ``RY(theta[l, q])`` on every qubit followed
by a CNOT ring ``q -> (q + 1) mod n``. The readout is ``<Z_q>`` per qubit.

Every gate in this circuit is real, so the batched engine used for training
keeps real amplitudes; :class:`QuantumState` and :func:`apply_gate` are the
general complex single-state interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .tensor import DimensionError, Tensor, _record, as_tensor

MAX_QUBITS = 14
HALF_PI = np.pi / 2

__all__ = [
    "QuantumState",
    "VqcArchitecture",
    "H",
    "RY",
    "CNOT",
    "init_state",
    "apply_gate",
    "circuit_gates",
    "run_gates",
    "expectation_z",
    "encoding_angles",
    "angle_encode",
    "simulate_expectations",
    "vqc_forward",
    "vqc_gradients",
    "vqc_layer",
]


@dataclass
class QuantumState:
    n_qubits: int
    amplitudes: np.ndarray

    def copy(self) -> "QuantumState":
        return QuantumState(self.n_qubits, self.amplitudes.copy())

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2)))


@dataclass(frozen=True)
class VqcArchitecture:
    n_qubits: int = 4
    n_layers: int = 2
    hadamard: bool = True  # test hook: skip the Hadamard layer before encoding

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {self.n_qubits}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")

    @property
    def param_shape(self) -> tuple:
        return (self.n_layers, self.n_qubits)


class H(NamedTuple):
    qubit: int


class RY(NamedTuple):
    qubit: int
    theta: float


class CNOT(NamedTuple):
    control: int
    target: int


def init_state(n_qubits: int) -> QuantumState:
    if not 1 <= n_qubits <= MAX_QUBITS:
        raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}")
    amps = np.zeros(2 ** n_qubits, dtype=np.complex128)
    amps[0] = 1.0
    return QuantumState(n_qubits, amps)


def _check_qubit(q: int, n: int) -> None:
    if not 0 <= q < n:
        raise IndexError(f"qubit index {q} out of range for {n} qubits")


def _apply_1q(amps: np.ndarray, n: int, q: int, u: np.ndarray) -> np.ndarray:
    psi = amps.reshape(2 ** q, 2, 2 ** (n - q - 1))
    out = np.einsum("ab,ibj->iaj", u, psi)
    return out.reshape(-1)


def apply_gate(state: QuantumState, gate) -> QuantumState:
    """Return a new state with ``gate`` applied."""
    n = state.n_qubits
    if isinstance(gate, H):
        _check_qubit(gate.qubit, n)
        u = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
        return QuantumState(n, _apply_1q(state.amplitudes, n, gate.qubit, u.astype(np.complex128)))
    if isinstance(gate, RY):
        _check_qubit(gate.qubit, n)
        c, s = np.cos(gate.theta / 2), np.sin(gate.theta / 2)
        u = np.array([[c, -s], [s, c]], dtype=np.complex128)
        return QuantumState(n, _apply_1q(state.amplitudes, n, gate.qubit, u))
    if isinstance(gate, CNOT):
        _check_qubit(gate.control, n)
        _check_qubit(gate.target, n)
        if gate.control == gate.target:
            raise ValueError("CNOT control and target must differ")
        return QuantumState(n, state.amplitudes[_cnot_permutation(n, gate.control, gate.target)])
    raise TypeError(f"unsupported gate {gate!r}")


@lru_cache(maxsize=None)
def _cnot_permutation(n: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(2 ** n)
    cbit = 1 << (n - 1 - control)
    tbit = 1 << (n - 1 - target)
    return np.where(idx & cbit, idx ^ tbit, idx)


@lru_cache(maxsize=None)
def _ring_permutation(n: int) -> np.ndarray:
    """Index map for one CNOT ring, so ``new = old[perm]``."""
    perm = np.arange(2 ** n)
    if n == 1:
        return perm
    for q in range(n):
        perm = perm[_cnot_permutation(n, q, (q + 1) % n)]
    return perm


@lru_cache(maxsize=None)
def _z_signs(n: int) -> np.ndarray:
    idx = np.arange(2 ** n)[:, None]
    bits = (idx >> (n - 1 - np.arange(n))[None, :]) & 1
    return 1.0 - 2.0 * bits


def expectation_z(state: QuantumState) -> np.ndarray:
    probs = np.abs(state.amplitudes) ** 2
    return probs @ _z_signs(state.n_qubits)


def encoding_angles(features: np.ndarray) -> np.ndarray:
    return HALF_PI * np.tanh(features)


def circuit_gates(features, params, arch: VqcArchitecture) -> list:
    """Gate list of the full circuit, for the single-state interface."""
    f = np.asarray(features, dtype=np.float64)
    theta = np.asarray(params, dtype=np.float64)
    _check_shapes(f[None], theta, arch)
    n = arch.n_qubits
    gates = [H(q) for q in range(n)] if arch.hadamard else []
    gates += [RY(q, a) for q, a in enumerate(encoding_angles(f))]
    for layer in theta:
        gates += [RY(q, a) for q, a in enumerate(layer)]
        if n > 1:
            gates += [CNOT(q, (q + 1) % n) for q in range(n)]
    return gates


def run_gates(n_qubits: int, gates) -> QuantumState:
    state = init_state(n_qubits)
    for g in gates:
        state = apply_gate(state, g)
    return state


def angle_encode(features, hadamard: bool = True) -> QuantumState:
    f = np.asarray(as_tensor(features).data, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionError("angle_encode", "features", "1-d", f.shape)
    if not np.all(np.isfinite(f)):
        raise ValueError("angle_encode: features must be finite")
    n = len(f)
    gates = [H(q) for q in range(n)] if hadamard else []
    gates += [RY(q, a) for q, a in enumerate(encoding_angles(f))]
    return run_gates(n, gates)


def _check_shapes(features: np.ndarray, theta: np.ndarray, arch: VqcArchitecture) -> None:
    if features.ndim != 2 or features.shape[1] != arch.n_qubits:
        raise DimensionError("vqc", "features", arch.n_qubits, features.shape[-1] if features.ndim else features.shape)
    if theta.shape != arch.param_shape:
        raise DimensionError("vqc", "params", arch.param_shape, theta.shape)


# ---------------------------------------------------------------- batched engine

def _ry_rows(psi: np.ndarray, n: int, q: int, angles: np.ndarray) -> np.ndarray:
    """Apply RY(angles[m]) to qubit ``q`` of every row ``m`` of real states ``psi``."""
    m = psi.shape[0]
    view = psi.reshape(m, 2 ** q, 2, 2 ** (n - q - 1))
    c = np.cos(angles / 2)[:, None, None]
    s = np.sin(angles / 2)[:, None, None]
    a0 = view[:, :, 0, :]
    a1 = view[:, :, 1, :]
    out = np.empty_like(view)
    out[:, :, 0, :] = c * a0 - s * a1
    out[:, :, 1, :] = s * a0 + c * a1
    return out.reshape(m, -1)


def simulate_expectations(enc_angles: np.ndarray, var_angles: np.ndarray, arch: VqcArchitecture) -> np.ndarray:
    """``<Z_q>`` for rows of encoding angles [M, n] and variational angles [M, L, n]."""
    n, n_layers = arch.n_qubits, arch.n_layers
    m = enc_angles.shape[0]
    psi = np.zeros((m, 2 ** n))
    if arch.hadamard:
        psi[:] = 2.0 ** (-n / 2)
    else:
        psi[:, 0] = 1.0
    for q in range(n):
        psi = _ry_rows(psi, n, q, enc_angles[:, q])
    ring = _ring_permutation(n)
    for layer in range(n_layers):
        for q in range(n):
            psi = _ry_rows(psi, n, q, var_angles[:, layer, q])
        psi = psi[:, ring]
    return (psi * psi) @ _z_signs(n)


def vqc_forward(features, params, arch: VqcArchitecture) -> np.ndarray:
    """Expectations for one feature vector [n] or a batch [B, n]."""
    f = np.asarray(as_tensor(features).data)
    single = f.ndim == 1
    f2 = f[None] if single else f
    theta = np.asarray(as_tensor(params).data)
    _check_shapes(f2, theta, arch)
    var = np.broadcast_to(theta, (len(f2),) + theta.shape)
    out = simulate_expectations(encoding_angles(f2), var, arch)
    return out[0] if single else out


def vqc_gradients(features, params, arch: VqcArchitecture, upstream) -> tuple:
    """Parameter-shift gradients of ``sum(upstream * <Z>)``.

    Returns ``(grad_params [L, n], grad_features [B, n] or [n])``. Every encoding
    and variational angle is shifted by +-pi/2; the feature gradient is then
    chained through the tanh squash.
    """
    f = np.asarray(as_tensor(features).data)
    single = f.ndim == 1
    f2 = f[None] if single else f
    theta = np.asarray(as_tensor(params).data)
    _check_shapes(f2, theta, arch)
    g = np.asarray(upstream, dtype=np.float64).reshape(f2.shape)
    b, n = f2.shape
    n_layers = arch.n_layers
    enc = encoding_angles(f2)
    n_shift = 2 * n + 2 * n_layers * n
    enc_rows = np.repeat(enc[:, None, :], n_shift, axis=1)
    var_rows = np.repeat(np.broadcast_to(theta, (b, 1) + theta.shape), n_shift, axis=1).copy()
    for q in range(n):
        enc_rows[:, 2 * q, q] += HALF_PI
        enc_rows[:, 2 * q + 1, q] -= HALF_PI
    base = 2 * n
    for layer in range(n_layers):
        for q in range(n):
            k = base + 2 * (layer * n + q)
            var_rows[:, k, layer, q] += HALF_PI
            var_rows[:, k + 1, layer, q] -= HALF_PI
    ez = simulate_expectations(enc_rows.reshape(b * n_shift, n),
                               var_rows.reshape(b * n_shift, n_layers, n), arch).reshape(b, n_shift, n)
    # d<Z_k>/d(angle) for every shifted angle, contracted with upstream over k
    dz = 0.5 * (ez[:, 0::2, :] - ez[:, 1::2, :])
    contracted = np.einsum("bsk,bk->bs", dz, g)
    d_enc = contracted[:, :n]
    d_var = contracted[:, n:].sum(axis=0).reshape(n_layers, n)
    d_feat = d_enc * HALF_PI * (1.0 - np.tanh(f2) ** 2)
    return d_var, (d_feat[0] if single else d_feat)


def vqc_layer(features, params, arch: VqcArchitecture) -> Tensor:
    """Taped VQC op: features [B, n] (or [n]) and angles [L, n] to expectations."""
    features, params = as_tensor(features), as_tensor(params)
    out = Tensor(vqc_forward(features, params, arch))

    def back(g):
        d_params, d_feat = vqc_gradients(features, params, arch, g)
        return d_feat, d_params

    return _record(out, (features, params), back)
