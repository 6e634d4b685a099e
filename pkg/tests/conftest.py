import numpy as np
import pytest

from qvit import qsim


def random_circuit(rng, n_qubits, n_gates):
    """Random mix of Ry rotations and CNOTs as placed gates."""
    gates = []
    for _ in range(n_gates):
        if n_qubits >= 2 and rng.random() < 0.4:
            c, t = rng.choice(n_qubits, size=2, replace=False)
            gates.append(qsim.PlacedCNOT(int(c), int(t)))
        else:
            q = int(rng.integers(n_qubits))
            gates.append(qsim.Placed1Q(q, qsim.ry(rng.uniform(-np.pi, np.pi))))
    return gates


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
