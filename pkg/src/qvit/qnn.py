"""Parameterized quantum networks: angle encoding, the Ry-CNOT pair ansatz,
ring topologies, forward evaluation, and exact gradients.

A network on n qubits maps R^n -> [-1, 1]^n: encode the input as per-qubit
rotation angles, apply one parameterized (Ry, Ry, CNOT) block per qubit
pair, then read out per-qubit <Z>. With the ring topology this uses exactly
2n parameters, so the three projections of one attention block use 6n.

Production evaluation and differentiation run through the active kernel
backend (compiled or numpy, see qvit._kernels); the layered path built from
qvit.qsim primitives is kept as the public reference and test oracle.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import pi

import numpy as np

from . import _kernels, qsim


def ring_topology(n):
    """Nearest-neighbor ring: (0,1), (1,2), ..., (n-1,0), lower index control."""
    if n < 2:
        raise ValueError(f"ring topology needs at least 2 qubits, got {n}")
    return tuple((q, (q + 1) % n) for q in range(n))


@dataclass(frozen=True)
class QnnSpec:
    """One quantum projection: qubit count, pair list, and 2n angles."""

    n_qubits: int
    pairs: tuple
    params: np.ndarray

    def __post_init__(self):
        if not 1 <= self.n_qubits <= qsim.MAX_QUBITS:
            raise ValueError(f"unsupported qubit count {self.n_qubits}")
        pairs = tuple((int(c), int(t)) for c, t in self.pairs)
        for c, t in pairs:
            if c == t or not (0 <= c < self.n_qubits) or not (0 <= t < self.n_qubits):
                raise ValueError(f"bad qubit pair ({c}, {t})")
        params = np.ascontiguousarray(self.params, dtype=np.float64)
        if params.shape != (2 * len(pairs),):
            raise ValueError(
                f"need {2 * len(pairs)} parameters (two per pair), got {params.shape}")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "params", params)

    @property
    def n_params(self):
        return len(self.params)

    def controls(self):
        return np.array([c for c, _ in self.pairs], dtype=np.int64)

    def targets(self):
        return np.array([t for _, t in self.pairs], dtype=np.int64)

    def with_params(self, params):
        return QnnSpec(self.n_qubits, self.pairs, params)


def init_params(n_qubits, rng):
    """Uniform on [-pi, pi]: full-period start, clear of the zero-angle plateau."""
    return rng.uniform(-pi, pi, size=2 * n_qubits)


def ring_spec(n_qubits, rng=None, params=None):
    """QnnSpec on the ring topology, randomly initialized unless given params."""
    if params is None:
        if rng is None:
            raise ValueError("need either params or an rng to draw them")
        params = init_params(n_qubits, rng)
    return QnnSpec(n_qubits, ring_topology(n_qubits), params)


@dataclass(frozen=True)
class QnnGradients:
    """Exact Jacobians of one evaluation, rows indexed by output qubit."""

    d_output_d_input: np.ndarray   # (n, n), [j, i] = dy_j / dx_i
    d_output_d_params: np.ndarray  # (n, 2n), [j, k] = dy_j / dtheta_k


def angle_encode(x):
    """Product state from per-qubit rotations: no entanglement."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 1:
        raise ValueError("angle_encode expects a 1-D vector")
    state = qsim.new_zero_state(len(x))
    for q, angle in enumerate(x):
        qsim.apply_single_qubit(state, q, qsim.ry(angle))
    return state


def pair_ansatz(state, q1, q2, theta1, theta2):
    """One ansatz block: Ry(theta1) on q1, Ry(theta2) on q2, then CNOT(q1 -> q2)."""
    qsim.apply_single_qubit(state, q1, qsim.ry(theta1))
    qsim.apply_single_qubit(state, q2, qsim.ry(theta2))
    qsim.apply_cnot(state, q1, q2)
    return state


def circuit_gates(x, spec):
    """The full placed-gate sequence, for the qsim reference path and oracle."""
    gates = [qsim.Placed1Q(q, qsim.ry(angle)) for q, angle in enumerate(x)]
    for p, (c, t) in enumerate(spec.pairs):
        gates.append(qsim.Placed1Q(c, qsim.ry(spec.params[2 * p])))
        gates.append(qsim.Placed1Q(t, qsim.ry(spec.params[2 * p + 1])))
        gates.append(qsim.PlacedCNOT(c, t))
    return gates


def _check_input(x, spec):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (spec.n_qubits,):
        raise ValueError(f"input width {x.shape} != qubit count {spec.n_qubits}")
    return x


def qnn_forward(x, spec):
    """Evaluate the network: encode, apply all pair blocks, measure <Z>."""
    x = _check_input(x, spec)
    y = _kernels.forward_batch(x[None, :], spec.params, spec.controls(), spec.targets())
    return y[0]


def _row_chunks(n_rows, threads):
    threads = max(1, min(threads, n_rows))
    bounds = np.linspace(0, n_rows, threads + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


_POOLS = {}


def _pool(threads):
    # pools are reused across calls; worker threads spend their time inside
    # nogil kernel sections, so they parallelize for real
    if threads not in _POOLS:
        _POOLS[threads] = ThreadPoolExecutor(max_workers=threads)
    return _POOLS[threads]


def qnn_forward_batch(rows, spec, threads=1):
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != spec.n_qubits:
        raise ValueError(f"row width {rows.shape} != qubit count {spec.n_qubits}")
    c, t = spec.controls(), spec.targets()
    if threads <= 1 or len(rows) < 2:
        return _kernels.forward_batch(rows, spec.params, c, t)
    parts = _pool(threads).map(
        lambda ab: _kernels.forward_batch(rows[ab[0]:ab[1]], spec.params, c, t),
        _row_chunks(len(rows), threads))
    return np.concatenate(list(parts), axis=0)


def qnn_jacobians_batch(rows, spec, threads=1):
    """Outputs plus full input/parameter Jacobians for every row (adjoint sweep).

    Rows are independent, so the batch may fan out over worker threads; the
    chunking is a fixed function of the row count, never of timing, so
    results are identical for any thread count.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != spec.n_qubits:
        raise ValueError(f"row width {rows.shape} != qubit count {spec.n_qubits}")
    c, t = spec.controls(), spec.targets()
    if threads <= 1 or len(rows) < 2:
        return _kernels.jacobian_batch(rows, spec.params, c, t)
    parts = list(_pool(threads).map(
        lambda ab: _kernels.jacobian_batch(rows[ab[0]:ab[1]], spec.params, c, t),
        _row_chunks(len(rows), threads)))
    return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(3))


def qnn_adjoint_gradients(x, spec):
    """Exact dy/dx and dy/dtheta from one reverse sweep over the circuit.

    Cost is O(gates * 2^n) per dragged readout vector, independent of the
    parameter count; parameter_shift_gradient is the independent oracle.
    """
    x = _check_input(x, spec)
    _, jx, jt = _kernels.jacobian_batch(
        x[None, :], spec.params, spec.controls(), spec.targets())
    return QnnGradients(d_output_d_input=jx[0], d_output_d_params=jt[0])


def parameter_shift_gradient(x, spec, param_index):
    """dy/dtheta_k via the +-pi/2 shift rule; exact for Ry generators."""
    if not 0 <= param_index < spec.n_params:
        raise ValueError(f"parameter index {param_index} out of range")
    shift = np.zeros(spec.n_params)
    shift[param_index] = pi / 2
    hi = qnn_forward(x, spec.with_params(spec.params + shift))
    lo = qnn_forward(x, spec.with_params(spec.params - shift))
    return (hi - lo) / 2.0
