"""Dense statevector simulation of the RX/CNOT circuit family.

Amplitude arrays have shape ``(..., 2**d)``; any leading axes are a batch.
Wire 0 is the most significant bit of the basis index.  Gates act in
O(2**d) per state: no 2**d x 2**d matrices are ever formed here.

The circuit is ``angle_encode`` (RX(-x_j) on wire j, i.e. RX-dagger) followed
by L layers, each applying RX(theta[l, i]) to every wire and then the CNOT
chain (0,1), (1,2), ..., (d-2, d-1).  Readout is <Z_j> on every wire.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ContractViolation

MAX_QUBITS = 12
SHIFT = np.pi / 2


@dataclass
class PqcConfig:
    """Rotation angles theta[l, i] for L layers on d qubits."""

    thetas: np.ndarray

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        if self.thetas.ndim != 2:
            raise ContractViolation("angles must have shape (layers, qubits)")

    @property
    def layers(self) -> int:
        return self.thetas.shape[0]

    @property
    def qubits(self) -> int:
        return self.thetas.shape[1]

    @classmethod
    def zeros(cls, qubits: int, layers: int) -> "PqcConfig":
        return cls(np.zeros((layers, qubits)))


class StateVector:
    """2**d complex amplitudes with in-place gate methods."""

    def __init__(self, amplitudes):
        amps = np.asarray(amplitudes, dtype=np.complex128)
        d = int(np.log2(amps.shape[-1]))
        if 2**d != amps.shape[-1]:
            raise ContractViolation("amplitude count is not a power of two")
        self.amplitudes = amps
        self.num_qubits = d

    @classmethod
    def zero(cls, d: int) -> "StateVector":
        amps = np.zeros(2**d, dtype=np.complex128)
        amps[0] = 1.0
        return cls(amps)

    @classmethod
    def basis(cls, bits: str) -> "StateVector":
        amps = np.zeros(2 ** len(bits), dtype=np.complex128)
        amps[int(bits, 2)] = 1.0
        return cls(amps)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2)))

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy())

    def rx(self, qubit: int, theta) -> "StateVector":
        self.amplitudes = rx_kernel(self.amplitudes, self.num_qubits, qubit, theta)
        return self

    def cnot(self, control: int, target: int) -> "StateVector":
        self.amplitudes = cnot_kernel(self.amplitudes, self.num_qubits, control, target)
        return self


# -- kernels -----------------------------------------------------------------


def _check_wire(d: int, wire: int):
    if not 0 <= wire < d:
        raise ContractViolation(f"wire {wire} out of range for {d} qubits")


def rx_kernel(amps: np.ndarray, d: int, wire: int, theta) -> np.ndarray:
    """RX(theta) on ``wire``; theta is a scalar or broadcasts over the batch axes."""
    _check_wire(d, wire)
    theta = np.asarray(theta, dtype=np.float64)
    batch = amps.shape[:-1]
    psi = amps.reshape(batch + (2**wire, 2, 2 ** (d - wire - 1)))
    c = np.cos(theta / 2)[..., None, None]
    s = np.sin(theta / 2)[..., None, None]
    a0 = psi[..., 0, :]
    a1 = psi[..., 1, :]
    out = np.empty_like(psi)
    out[..., 0, :] = c * a0 - 1j * s * a1
    out[..., 1, :] = c * a1 - 1j * s * a0
    return out.reshape(amps.shape)


_CNOT_PERM: dict[tuple[int, int, int], np.ndarray] = {}


def _cnot_perm(d: int, control: int, target: int) -> np.ndarray:
    key = (d, control, target)
    if key not in _CNOT_PERM:
        idx = np.arange(2**d)
        cbit = 1 << (d - 1 - control)
        tbit = 1 << (d - 1 - target)
        _CNOT_PERM[key] = np.where(idx & cbit, idx ^ tbit, idx)
    return _CNOT_PERM[key]


def cnot_kernel(amps: np.ndarray, d: int, control: int, target: int) -> np.ndarray:
    _check_wire(d, control)
    _check_wire(d, target)
    if control == target:
        raise ContractViolation("CNOT control and target must differ")
    return amps[..., _cnot_perm(d, control, target)]


_Z_SIGNS: dict[int, np.ndarray] = {}


def _z_signs(d: int) -> np.ndarray:
    """(d, 2**d) table of Z eigenvalues per wire."""
    if d not in _Z_SIGNS:
        idx = np.arange(2**d)
        bits = (idx[None, :] >> (d - 1 - np.arange(d))[:, None]) & 1
        _Z_SIGNS[d] = 1.0 - 2.0 * bits
    return _Z_SIGNS[d]


def expvals_z(amps: np.ndarray, d: int) -> np.ndarray:
    """<Z_j> for every wire; shape (..., d)."""
    probs = np.abs(amps) ** 2
    return probs @ _z_signs(d).T


def encode_kernel(x: np.ndarray) -> np.ndarray:
    """Product state with RX(-x_j)|0> on wire j; x has shape (..., d)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    # RX(-x)|0> = cos(x/2)|0> + i sin(x/2)|1>
    q0 = np.cos(x / 2).astype(np.complex128)
    q1 = 1j * np.sin(x / 2)
    amps = np.ones(x.shape[:-1] + (1,), dtype=np.complex128)
    # prepend wires from the last to the first so wire 0 ends up most significant
    for j in reversed(range(d)):
        amps = np.concatenate([amps * q0[..., j : j + 1], amps * q1[..., j : j + 1]], axis=-1)
    return amps


def pqc_kernel(amps: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Apply the layered circuit; thetas shape (..., L, d) broadcasting over the batch."""
    thetas = np.asarray(thetas, dtype=np.float64)
    L, d = thetas.shape[-2:]
    for l in range(L):
        for i in range(d):
            amps = rx_kernel(amps, d, i, thetas[..., l, i])
        for i in range(d - 1):
            amps = cnot_kernel(amps, d, i, i + 1)
    return amps


# -- public operations ---------------------------------------------------------


def angle_encode(x) -> StateVector:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractViolation("angle_encode expects one feature vector")
    if x.size > MAX_QUBITS:
        raise CapacityError(f"{x.size} qubits exceed the cap of {MAX_QUBITS}")
    return StateVector(encode_kernel(x))


def apply_rx(state: StateVector, qubit: int, theta: float) -> StateVector:
    return StateVector(rx_kernel(state.amplitudes, state.num_qubits, qubit, theta))


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    return StateVector(cnot_kernel(state.amplitudes, state.num_qubits, control, target))


def run_pqc(state: StateVector, config: PqcConfig) -> StateVector:
    if config.qubits != state.num_qubits:
        raise ContractViolation(f"config has {config.qubits} qubits, state has {state.num_qubits}")
    return StateVector(pqc_kernel(state.amplitudes, config.thetas))


def expval_z(state: StateVector, wire: int) -> float:
    _check_wire(state.num_qubits, wire)
    return float(expvals_z(state.amplitudes, state.num_qubits)[..., wire])


def quantum_layer_forward(x, config: PqcConfig) -> np.ndarray:
    """Per-wire <Z> after encoding ``x`` and running the circuit.

    ``x`` may carry leading batch axes: shape (..., d).
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d > MAX_QUBITS:
        raise CapacityError(f"{d} qubits exceed the cap of {MAX_QUBITS}")
    if d != config.qubits:
        raise ContractViolation(f"input has {d} features, circuit has {config.qubits} qubits")
    return expvals_z(pqc_kernel(encode_kernel(x), config.thetas), d)


def shift_jacobians(x: np.ndarray, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward values and parameter-shift Jacobians for a batch.

    Returns ``(z, dz_dtheta, dz_dx)`` with shapes (B, d), (B, L, d, d) and
    (B, d, d); the last axis of each Jacobian indexes the output wire.  All
    shifted circuits run as one batched simulation.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, d = x.shape
    L = thetas.shape[0]
    P = L * d
    # configuration 0 is unshifted; then +/- per theta; then +/- per input
    S = 1 + 2 * P + 2 * d
    th = np.broadcast_to(thetas, (S, L, d)).copy()
    xs = np.broadcast_to(x, (S, B, d)).copy()
    flat = th.reshape(S, P)
    for p in range(P):
        flat[1 + 2 * p, p] += SHIFT
        flat[2 + 2 * p, p] -= SHIFT
    base = 1 + 2 * P
    for j in range(d):
        xs[base + 2 * j, :, j] += SHIFT
        xs[base + 2 * j + 1, :, j] -= SHIFT
    amps = encode_kernel(xs)  # (S, B, 2^d)
    amps = pqc_kernel(amps, th[:, None, :, :])
    z = expvals_z(amps, d)  # (S, B, d)
    dth = (z[1 : 1 + 2 * P : 2] - z[2 : 2 + 2 * P : 2]) / 2  # (P, B, d)
    dx = (z[base::2] - z[base + 1 :: 2]) / 2  # (d, B, d)
    return z[0], dth.transpose(1, 0, 2).reshape(B, L, d, d), dx.transpose(1, 0, 2)


def param_shift_grad(x, config: PqcConfig, upstream) -> np.ndarray:
    """Gradient of sum_j upstream_j * <Z_j> with respect to every angle (L x d)."""
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != config.qubits or up.shape[-1] != config.qubits:
        raise ContractViolation("input / upstream size does not match the circuit")
    _, dth, _ = shift_jacobians(x.reshape(-1, config.qubits), config.thetas)
    return np.einsum("blij,bj->li", dth, up.reshape(-1, config.qubits))
