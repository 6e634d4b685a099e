"""Pure-numpy fallback for the hot circuit kernels.

Same contract as the compiled module ``qvit._kernels._core``: batched
evaluation and adjoint differentiation of the angle-encode / Ry-CNOT pair
circuit, on real amplitudes (this gate family never leaves the real
subspace when starting from the all-zeros register).

Amplitude index convention is little-endian: qubit q is bit q of the index.
Vectorization is over the batch axis, so per-gate numpy overhead is paid
once per batch instead of once per row.
"""

import numpy as np

BACKEND_NAME = "pure"


def _sign_table(n):
    # signs[b, j] = +1 if bit j of b is 0 else -1
    b = np.arange(1 << n)
    j = np.arange(n)
    return (1.0 - 2.0 * ((b[:, None] >> j[None, :]) & 1)).astype(np.float64)


def _apply_ry(S, q, c, s):
    """Rotate qubit q of every row of S (batch, 2**n) in place.

    c, s are cos(theta/2) / sin(theta/2), either scalars or (batch, 1, 1)
    arrays for per-row angles.
    """
    B = S.shape[0]
    v = S.reshape(B, -1, 2, 1 << q)
    a0 = v[:, :, 0, :].copy()
    a1 = v[:, :, 1, :]
    v[:, :, 0, :] = c * a0 - s * a1
    v[:, :, 1, :] = s * a0 + c * a1


def _cnot_index_pairs(n, ctrl, targ):
    idx = np.arange(1 << n)
    i = idx[((idx >> ctrl) & 1 == 1) & ((idx >> targ) & 1 == 0)]
    return i, i | (1 << targ)


def _apply_cnot(S, n, ctrl, targ):
    i, j = _cnot_index_pairs(n, ctrl, targ)
    tmp = S[:, i].copy()
    S[:, i] = S[:, j]
    S[:, j] = tmp


def _gate_table(n, ctrl, targ):
    """Flatten the circuit to (kind, qubit-or-control, target, slot) rows.

    kind 0 = Ry, 1 = CNOT. slot indexes the differentiation target:
    0..n-1 the encoded inputs, n and up the circuit parameters, -1 none.
    """
    gates = []
    for q in range(n):
        gates.append((0, q, -1, q))
    for p in range(len(ctrl)):
        gates.append((0, int(ctrl[p]), -1, n + 2 * p))
        gates.append((0, int(targ[p]), -1, n + 2 * p + 1))
        gates.append((1, int(ctrl[p]), int(targ[p]), -1))
    return gates


def _run_forward(X, thetas, ctrl, targ, cache=None):
    B, n = X.shape
    S = np.zeros((B, 1 << n))
    S[:, 0] = 1.0
    for kind, qa, qb, slot in _gate_table(n, ctrl, targ):
        if kind == 0:
            if slot >= 0 and slot < n:
                half = X[:, slot] / 2.0
                c = np.cos(half)[:, None, None]
                s = np.sin(half)[:, None, None]
            else:
                theta = thetas[slot - n]
                c = np.cos(theta / 2.0)
                s = np.sin(theta / 2.0)
            _apply_ry(S, qa, c, s)
        else:
            _apply_cnot(S, n, qa, qb)
        if cache is not None:
            cache.append(S.copy())
    return S


def _expectations(psi, signs):
    # reduce along the amplitude axis (not BLAS: gemm kernels pick
    # shape-dependent summation orders, which would make batched results
    # differ from single-row results in the last ulp)
    return ((psi * psi)[:, :, None] * signs[None, :, :]).sum(axis=1)


def forward_batch(X, thetas, ctrl, targ):
    """Evaluate the circuit for every row of X. Returns per-qubit <Z>."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[1]
    psi = _run_forward(X, thetas, ctrl, targ)
    return _expectations(psi, _sign_table(n))


def jacobian_batch(X, thetas, ctrl, targ):
    """Adjoint-differentiate the circuit for every row of X.

    Returns (Y, JX, JT): outputs (B, n), input Jacobians (B, n, n) with
    [t, j, i] = dy_j/dx_i, and parameter Jacobians (B, n, 2 * n_pairs).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    B, n = X.shape
    size = 1 << n
    signs = _sign_table(n)

    cache = []
    psi = _run_forward(X, thetas, ctrl, targ, cache=cache)
    Y = _expectations(psi, signs)

    JX = np.zeros((B, n, n))
    JT = np.zeros((B, n, 2 * len(ctrl)))
    # lam[:, :, j] = Z_j psi, dragged backward through the inverse circuit
    lam = psi[:, :, None] * signs[None, :, :]

    gates = _gate_table(n, ctrl, targ)
    for g in range(len(gates) - 1, -1, -1):
        kind, qa, qb, slot = gates[g]
        if slot >= 0:
            # dy_j/dtheta = sum over qubit-qa pairs of
            #   lam[i1, j] * phi[i0] - lam[i0, j] * phi[i1]
            phi = cache[g]
            Lv = lam.reshape(B, -1, 2, 1 << qa, n)
            Pv = phi.reshape(B, -1, 2, 1 << qa)
            col = (Lv[:, :, 1] * Pv[:, :, 0, :, None]).sum(axis=(1, 2)) \
                - (Lv[:, :, 0] * Pv[:, :, 1, :, None]).sum(axis=(1, 2))
            if slot < n:
                JX[:, :, slot] = col
            else:
                JT[:, :, slot - n] = col
        if kind == 0:
            if slot < n:
                half = X[:, slot] / 2.0
                c = np.cos(half)[:, None, None, None]
                s = np.sin(half)[:, None, None, None]
            else:
                theta = thetas[slot - n]
                c = np.cos(theta / 2.0)
                s = np.sin(theta / 2.0)
            # transpose of Ry(theta) = Ry(-theta)
            v = lam.reshape(B, -1, 2, 1 << qa, n)
            a0 = v[:, :, 0].copy()
            a1 = v[:, :, 1]
            v[:, :, 0] = c * a0 + s * a1
            v[:, :, 1] = -s * a0 + c * a1
        else:
            i, j = _cnot_index_pairs(n, qa, qb)
            tmp = lam[:, i, :].copy()
            lam[:, i, :] = lam[:, j, :]
            lam[:, j, :] = tmp
    return Y, JX, JT
