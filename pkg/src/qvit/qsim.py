"""Exact state-vector simulation of small qubit registers.

Amplitudes are complex double precision and ordered little-endian: qubit q
is bit q of the amplitude index, so |q_{n-1} ... q_1 q_0> sits at index
sum_q q_i * 2**q. Gates are applied as in-place strided sweeps over the
amplitude array; the full 2^n x 2^n operator is only ever materialized by
the brute-force oracle used in tests.

Global phase is not tracked (every readout here is phase-invariant).
"""

from dataclasses import dataclass, field
from math import cos, sin

import numpy as np

MAX_QUBITS = 12
ORACLE_MAX_QUBITS = 8


@dataclass(frozen=True)
class Gate2x2:
    """A single-qubit gate. Unitarity is asserted in debug runs only."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.shape != (2, 2):
            raise ValueError(f"gate matrix must be 2x2, got {m.shape}")
        object.__setattr__(self, "matrix", m)
        assert np.allclose(m @ m.conj().T, np.eye(2), atol=1e-12), \
            "gate matrix is not unitary"


def ry(theta):
    """Rotation [[cos t/2, -sin t/2], [sin t/2, cos t/2]].

    Doubles as the per-qubit angle-encoding gate (same matrix with the
    data value as the angle).
    """
    c, s = cos(theta / 2.0), sin(theta / 2.0)
    return Gate2x2(np.array([[c, -s], [s, c]]))


@dataclass(frozen=True)
class Placed1Q:
    qubit: int
    gate: Gate2x2


@dataclass(frozen=True)
class PlacedCNOT:
    control: int
    target: int


@dataclass
class StateVector:
    """n-qubit register: 2**n complex amplitudes of unit norm."""

    n_qubits: int
    amplitudes: np.ndarray = field(repr=False)

    def norm(self):
        return float(np.linalg.norm(self.amplitudes))

    def copy(self):
        return StateVector(self.n_qubits, self.amplitudes.copy())


def new_zero_state(n_qubits):
    """The |0...0> register."""
    if not 1 <= n_qubits <= MAX_QUBITS:
        raise ValueError(
            f"qubit count {n_qubits} outside supported range 1..{MAX_QUBITS}")
    amps = np.zeros(1 << n_qubits, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(n_qubits, amps)


def _check_qubit(state, qubit):
    if not 0 <= qubit < state.n_qubits:
        raise ValueError(
            f"qubit {qubit} out of range for {state.n_qubits}-qubit state")


def apply_single_qubit(state, qubit, gate):
    """Apply a 2x2 gate to one qubit, in place. Returns the mutated state."""
    _check_qubit(state, qubit)
    m = gate.matrix
    v = state.amplitudes.reshape(-1, 2, 1 << qubit)
    a0 = v[:, 0, :].copy()
    a1 = v[:, 1, :]
    v[:, 0, :] = m[0, 0] * a0 + m[0, 1] * a1
    v[:, 1, :] = m[1, 0] * a0 + m[1, 1] * a1
    return state


def apply_cnot(state, control, target):
    """Flip the target bit of every amplitude whose control bit is 1."""
    _check_qubit(state, control)
    _check_qubit(state, target)
    if control == target:
        raise ValueError("control and target must differ")
    idx = np.arange(1 << state.n_qubits)
    i = idx[((idx >> control) & 1 == 1) & ((idx >> target) & 1 == 0)]
    j = i | (1 << target)
    amps = state.amplitudes
    tmp = amps[i].copy()
    amps[i] = amps[j]
    amps[j] = tmp
    return state


def expectation_z(state, qubit):
    """<Z> of one qubit: P(bit 0) - P(bit 1), in [-1, 1]."""
    _check_qubit(state, qubit)
    p = np.abs(state.amplitudes) ** 2
    v = p.reshape(-1, 2, 1 << qubit)
    return float(v[:, 0, :].sum() - v[:, 1, :].sum())


_SIGN_TABLES = {}


def _sign_table(n):
    # signs[b, q] = +1 if bit q of b is 0 else -1
    tab = _SIGN_TABLES.get(n)
    if tab is None:
        b = np.arange(1 << n)
        q = np.arange(n)
        tab = (1.0 - 2.0 * ((b[:, None] >> q[None, :]) & 1)).astype(np.float64)
        _SIGN_TABLES[n] = tab
    return tab


def expectation_z_all(state):
    """Per-qubit <Z> values in one pass over the amplitudes."""
    p = np.abs(state.amplitudes) ** 2
    return p @ _sign_table(state.n_qubits)


def apply_gates(state, gates):
    """Apply a sequence of placed gates in order."""
    for op in gates:
        if isinstance(op, Placed1Q):
            apply_single_qubit(state, op.qubit, op.gate)
        elif isinstance(op, PlacedCNOT):
            apply_cnot(state, op.control, op.target)
        else:
            raise TypeError(f"not a placed gate: {op!r}")
    return state


def _full_1q_matrix(n_qubits, qubit, gate):
    # little-endian: qubit 0 is the last Kronecker factor
    return np.kron(np.eye(1 << (n_qubits - 1 - qubit)),
                   np.kron(gate.matrix, np.eye(1 << qubit)))


def _full_cnot_matrix(n_qubits, control, target):
    dim = 1 << n_qubits
    m = np.zeros((dim, dim), dtype=np.complex128)
    for i in range(dim):
        j = i ^ (((i >> control) & 1) << target)
        m[j, i] = 1.0
    return m


def brute_force_circuit_matrix(n_qubits, gates):
    """Full circuit unitary built from Kronecker products. Test oracle only.

    Deliberately naive: each gate is expanded to its 2^n x 2^n matrix and
    the matrices are multiplied in circuit order.
    """
    if n_qubits > ORACLE_MAX_QUBITS:
        raise ValueError(
            f"oracle supports at most {ORACLE_MAX_QUBITS} qubits, got {n_qubits}")
    u = np.eye(1 << n_qubits, dtype=np.complex128)
    for op in gates:
        if isinstance(op, Placed1Q):
            m = _full_1q_matrix(n_qubits, op.qubit, op.gate)
        elif isinstance(op, PlacedCNOT):
            m = _full_cnot_matrix(n_qubits, op.control, op.target)
        else:
            raise TypeError(f"not a placed gate: {op!r}")
        u = m @ u
    return u
