# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the angle-encode / Ry-CNOT pair circuit.

Hot path of the whole stack: every attention projection evaluates one of
these circuits per token, so the per-row cost here bounds training and
inference throughput. Real amplitudes only (the gate family is real and the
register starts at |0...0>); the generic complex simulator lives in
qvit.qsim and is used to cross-check these kernels.

Index convention is little-endian: qubit q is bit q of the amplitude index.

The adjoint sweep keeps one readout vector per output qubit (lam column j
starts as Z_j psi) and drags all of them backward through the transposed
circuit, reading the bracket dy_j/dtheta against forward states cached on
the way in. Each (Ry, Ry, CNOT) block is processed in a single pass over
its 4-amplitude groups so the readout matrix makes one memory round-trip
per block instead of three.
"""

from libc.math cimport cos, sin
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset

import numpy as np

BACKEND_NAME = "compiled"

DEF MAX_QUBITS = 12


cdef inline void _ry(double* s, Py_ssize_t size, int q, double c, double sn) noexcept nogil:
    cdef Py_ssize_t step = (<Py_ssize_t>1) << q
    cdef Py_ssize_t base = 0, off, i0, i1
    cdef double a0, a1
    while base < size:
        for off in range(step):
            i0 = base + off
            i1 = i0 + step
            a0 = s[i0]
            a1 = s[i1]
            s[i0] = c * a0 - sn * a1
            s[i1] = sn * a0 + c * a1
        base += 2 * step


cdef inline void _cnot(double* s, Py_ssize_t size, int cq, int tq) noexcept nogil:
    cdef Py_ssize_t cbit = (<Py_ssize_t>1) << cq
    cdef Py_ssize_t tbit = (<Py_ssize_t>1) << tq
    cdef Py_ssize_t i, j
    cdef double tmp
    for i in range(size):
        if (i & cbit) != 0 and (i & tbit) == 0:
            j = i | tbit
            tmp = s[i]
            s[i] = s[j]
            s[j] = tmp


cdef inline void _expz_all(const double* s, Py_ssize_t size, int n, double* y) noexcept nogil:
    cdef Py_ssize_t b
    cdef int q
    cdef double w
    for q in range(n):
        y[q] = 0.0
    for b in range(size):
        w = s[b] * s[b]
        for q in range(n):
            if (b >> q) & 1:
                y[q] -= w
            else:
                y[q] += w


cdef void _forward_row(const double* x, const double* th, const long* ctrl,
                       const long* targ, int n, int n_pairs, Py_ssize_t size,
                       double* s, double* y) noexcept nogil:
    cdef int q, p
    memset(s, 0, size * sizeof(double))
    s[0] = 1.0
    for q in range(n):
        _ry(s, size, q, cos(x[q] / 2), sin(x[q] / 2))
    for p in range(n_pairs):
        _ry(s, size, <int>ctrl[p], cos(th[2 * p] / 2), sin(th[2 * p] / 2))
        _ry(s, size, <int>targ[p], cos(th[2 * p + 1] / 2), sin(th[2 * p + 1] / 2))
        _cnot(s, size, <int>ctrl[p], <int>targ[p])
    _expz_all(s, size, n, y)


cdef void _jacobian_row(const double* x, const double* th, const long* ctrl,
                        const long* targ, const Py_ssize_t* groups,
                        int n, int n_pairs, Py_ssize_t size,
                        double* cache, double* lam,
                        double* y, double* jx, double* jt) noexcept nogil:
    cdef int q, p, j, l
    cdef Py_ssize_t b, base, off, i0, i1, step, gi, n_groups = size / 4
    cdef Py_ssize_t cb, tb, i00, i01, i10, i11
    cdef double theta, c, sn, cc, sc, ct, st, a0, a1, w0, w1, w
    cdef double b00, b01, b10, b11, e00, e01, e10, e11
    cdef double* st_buf
    cdef const double* phi
    cdef const double* phiA
    cdef const double* phiB
    cdef const Py_ssize_t* grp
    cdef double* r00
    cdef double* r01
    cdef double* r10
    cdef double* r11
    cdef double t00, t01, t10, t11
    cdef double colc[MAX_QUBITS]
    cdef double colt[MAX_QUBITS]

    # forward; cache the state after every Ry gate (brackets only need those)
    st_buf = cache + (n + 2 * n_pairs) * size  # last slot doubles as live state
    memset(st_buf, 0, size * sizeof(double))
    st_buf[0] = 1.0
    for q in range(n):
        _ry(st_buf, size, q, cos(x[q] / 2), sin(x[q] / 2))
        memcpy(cache + q * size, st_buf, size * sizeof(double))
    for p in range(n_pairs):
        _ry(st_buf, size, <int>ctrl[p], cos(th[2 * p] / 2), sin(th[2 * p] / 2))
        memcpy(cache + (n + 2 * p) * size, st_buf, size * sizeof(double))
        _ry(st_buf, size, <int>targ[p], cos(th[2 * p + 1] / 2), sin(th[2 * p + 1] / 2))
        memcpy(cache + (n + 2 * p + 1) * size, st_buf, size * sizeof(double))
        _cnot(st_buf, size, <int>ctrl[p], <int>targ[p])
    _expz_all(st_buf, size, n, y)

    # lam[b, j] = (Z_j psi)_b
    for b in range(size):
        w = st_buf[b]
        for j in range(n):
            lam[b * n + j] = -w if (b >> j) & 1 else w

    # blocks, last to first: fold transpose(CNOT) into the loads, bracket
    # theta_t against the state after its Ry, rotate, bracket theta_c,
    # rotate, store. One pass over lam per block.
    for p in range(n_pairs - 1, -1, -1):
        cb = (<Py_ssize_t>1) << ctrl[p]
        tb = (<Py_ssize_t>1) << targ[p]
        theta = th[2 * p]
        cc = cos(theta / 2)
        sc = sin(theta / 2)
        theta = th[2 * p + 1]
        ct = cos(theta / 2)
        st = sin(theta / 2)
        phiA = cache + (n + 2 * p) * size
        phiB = cache + (n + 2 * p + 1) * size
        grp = groups + p * n_groups
        for l in range(n):
            colc[l] = 0.0
            colt[l] = 0.0
        for gi in range(n_groups):
            i00 = grp[gi]
            i01 = i00 | tb
            i10 = i00 | cb
            i11 = i10 | tb
            r00 = lam + i00 * n
            r01 = lam + i01 * n
            r10 = lam + i10 * n
            r11 = lam + i11 * n
            b00 = phiB[i00]
            b01 = phiB[i01]
            b10 = phiB[i10]
            b11 = phiB[i11]
            e00 = phiA[i00]
            e01 = phiA[i01]
            e10 = phiA[i10]
            e11 = phiA[i11]
            for l in range(n):
                # transpose(CNOT) folded into the loads: control-1 rows swap
                t00 = r00[l]
                t01 = r01[l]
                t10 = r11[l]
                t11 = r10[l]
                # bracket for theta_t, then transpose(Ry(theta_t)) on target pairs
                colt[l] += t01 * b00 - t00 * b01 + t11 * b10 - t10 * b11
                a0 = t00
                a1 = t01
                t00 = ct * a0 + st * a1
                t01 = -st * a0 + ct * a1
                a0 = t10
                a1 = t11
                t10 = ct * a0 + st * a1
                t11 = -st * a0 + ct * a1
                # bracket for theta_c, then transpose(Ry(theta_c)) on control pairs
                colc[l] += t10 * e00 - t00 * e10 + t11 * e01 - t01 * e11
                a0 = t00
                a1 = t10
                r00[l] = cc * a0 + sc * a1
                r10[l] = -sc * a0 + cc * a1
                a0 = t01
                a1 = t11
                r01[l] = cc * a0 + sc * a1
                r11[l] = -sc * a0 + cc * a1
        for l in range(n):
            jt[l * 2 * n_pairs + 2 * p] = colc[l]
            jt[l * 2 * n_pairs + 2 * p + 1] = colt[l]

    # encoding gates, last to first; no rotation needed below gate 0
    for q in range(n - 1, -1, -1):
        theta = x[q]
        c = cos(theta / 2)
        sn = sin(theta / 2)
        phi = cache + q * size
        step = (<Py_ssize_t>1) << q
        for l in range(n):
            colc[l] = 0.0
        if q > 0:
            base = 0
            while base < size:
                for off in range(step):
                    i0 = base + off
                    i1 = i0 + step
                    w0 = phi[i0]
                    w1 = phi[i1]
                    r00 = lam + i0 * n
                    r01 = lam + i1 * n
                    for l in range(n):
                        a0 = r00[l]
                        a1 = r01[l]
                        colc[l] += a1 * w0 - a0 * w1
                        r00[l] = c * a0 + sn * a1
                        r01[l] = -sn * a0 + c * a1
                base += 2 * step
        else:
            base = 0
            while base < size:
                for off in range(step):
                    i0 = base + off
                    i1 = i0 + step
                    w0 = phi[i0]
                    w1 = phi[i1]
                    r00 = lam + i0 * n
                    r01 = lam + i1 * n
                    for l in range(n):
                        colc[l] += r01[l] * w0 - r00[l] * w1
                base += 2 * step
        for l in range(n):
            jx[l * n + q] = colc[l]


def _as_arrays(X, thetas, ctrl, targ):
    Xc = np.ascontiguousarray(X, dtype=np.float64)
    thc = np.ascontiguousarray(thetas, dtype=np.float64)
    cc = np.ascontiguousarray(ctrl, dtype=np.int64)
    tc = np.ascontiguousarray(targ, dtype=np.int64)
    n = Xc.shape[1]
    if n < 1 or n > MAX_QUBITS:
        raise ValueError(f"qubit count {n} outside supported range 1..{MAX_QUBITS}")
    if thc.shape[0] != 2 * cc.shape[0] or cc.shape[0] != tc.shape[0]:
        raise ValueError("need two angles per qubit pair")
    return Xc, thc, cc, tc


def forward_batch(X, thetas, ctrl, targ):
    """Evaluate the circuit for every row of X. Returns per-qubit <Z>."""
    Xc, thc, cc, tc = _as_arrays(X, thetas, ctrl, targ)
    cdef double[:, ::1] Xv = Xc
    cdef double[::1] thv = thc
    cdef long[::1] cv = cc
    cdef long[::1] tv = tc
    cdef int n = Xv.shape[1]
    cdef int n_pairs = cv.shape[0]
    cdef Py_ssize_t B = Xv.shape[0]
    Y = np.empty((B, n))
    cdef double[:, ::1] Yv = Y
    cdef Py_ssize_t size = (<Py_ssize_t>1) << n
    cdef Py_ssize_t t
    cdef double* s = <double*>malloc(size * sizeof(double))
    if s == NULL:
        raise MemoryError
    try:
        with nogil:
            for t in range(B):
                _forward_row(&Xv[t, 0], &thv[0] if thv.shape[0] else NULL,
                             &cv[0] if n_pairs else NULL,
                             &tv[0] if n_pairs else NULL,
                             n, n_pairs, size, s, &Yv[t, 0])
    finally:
        free(s)
    return Y


def jacobian_batch(X, thetas, ctrl, targ):
    """Adjoint-differentiate the circuit for every row of X.

    Returns (Y, JX, JT): outputs (B, n), input Jacobians (B, n, n) with
    [t, j, i] = dy_j/dx_i, and parameter Jacobians (B, n, 2 * n_pairs).
    """
    Xc, thc, cc, tc = _as_arrays(X, thetas, ctrl, targ)
    cdef double[:, ::1] Xv = Xc
    cdef double[::1] thv = thc
    cdef long[::1] cv = cc
    cdef long[::1] tv = tc
    cdef int n = Xv.shape[1]
    cdef int n_pairs = cv.shape[0]
    cdef Py_ssize_t B = Xv.shape[0]
    Y = np.empty((B, n))
    JX = np.empty((B, n, n))
    JT = np.empty((B, n, 2 * n_pairs))
    cdef double[:, ::1] Yv = Y
    cdef double[:, :, ::1] JXv = JX
    cdef double[:, :, ::1] JTv = JT
    cdef Py_ssize_t size = (<Py_ssize_t>1) << n
    cdef Py_ssize_t t, b, gi
    cdef int p
    cdef Py_ssize_t cb, tb, n_groups = size / 4
    # n_qubits + 2 * n_pairs cached Ry states plus one live-state slot
    cdef double* cache = <double*>malloc((n + 2 * n_pairs + 1) * size * sizeof(double))
    cdef double* lam = <double*>malloc(size * n * sizeof(double))
    cdef Py_ssize_t* groups = <Py_ssize_t*>malloc(
        max(n_pairs * n_groups, 1) * sizeof(Py_ssize_t))
    if cache == NULL or lam == NULL or groups == NULL:
        free(cache)
        free(lam)
        free(groups)
        raise MemoryError
    try:
        with nogil:
            for p in range(n_pairs):
                cb = (<Py_ssize_t>1) << cv[p]
                tb = (<Py_ssize_t>1) << tv[p]
                gi = 0
                for b in range(size):
                    if (b & cb) == 0 and (b & tb) == 0:
                        groups[p * n_groups + gi] = b
                        gi += 1
            for t in range(B):
                _jacobian_row(&Xv[t, 0], &thv[0] if thv.shape[0] else NULL,
                              &cv[0] if n_pairs else NULL,
                              &tv[0] if n_pairs else NULL,
                              groups, n, n_pairs, size, cache, lam,
                              &Yv[t, 0], &JXv[t, 0, 0], &JTv[t, 0, 0])
    finally:
        free(cache)
        free(lam)
        free(groups)
    return Y, JX, JT
