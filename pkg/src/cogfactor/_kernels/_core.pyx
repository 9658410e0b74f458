# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled FFBS and Cox-derivative kernels.

Mirrors ``_fallback`` exactly in inputs, outputs and algorithm; only the loop
structure differs (per subject here, per visit position there).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log

cnp.import_array()


class KernelError(ArithmeticError):
    pass


cdef double[6] JITTERS = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6]


cdef int _chol(double* a, double* L, Py_ssize_t q) noexcept nogil:
    """Lower Cholesky of the q x q row-major ``a`` into ``L``, with jitter.

    Returns 0 on success, -1 if every jitter level fails.
    """
    cdef Py_ssize_t i, j, k, t
    cdef double s, jit
    cdef bint ok
    for t in range(6):
        jit = JITTERS[t]
        ok = True
        for i in range(q):
            for j in range(i + 1):
                s = a[i * q + j]
                if i == j:
                    s += jit
                for k in range(j):
                    s -= L[i * q + k] * L[j * q + k]
                if i == j:
                    if s <= 0.0:
                        ok = False
                        break
                    L[i * q + i] = sqrt(s)
                else:
                    L[i * q + j] = s / L[j * q + j]
            if not ok:
                break
            for j in range(i + 1, q):
                L[i * q + j] = 0.0
        if ok:
            return 0
    return -1


cdef void _chol_solve(double* L, double* b, Py_ssize_t q, Py_ssize_t ncol) noexcept nogil:
    """Solve (L L') X = B in place; B is q x ncol row-major."""
    cdef Py_ssize_t i, k, c
    cdef double s
    for c in range(ncol):
        for i in range(q):
            s = b[i * ncol + c]
            for k in range(i):
                s -= L[i * q + k] * b[k * ncol + c]
            b[i * ncol + c] = s / L[i * q + i]
        for i in range(q - 1, -1, -1):
            s = b[i * ncol + c]
            for k in range(i + 1, q):
                s -= L[k * q + i] * b[k * ncol + c]
            b[i * ncol + c] = s / L[i * q + i]


def ffbs_batch(y, offsets, deltas, G, sigma_eps, sigma_eta, m0, P0, z):
    """Forward filter then backward sample every subject's factor path.

    See ``_fallback.ffbs_batch`` for the argument layout.
    """
    cdef double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef cnp.int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef double[::1] dl = np.ascontiguousarray(deltas, dtype=np.float64)
    cdef double[:, ::1] Gm = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[::1] se = np.ascontiguousarray(sigma_eps, dtype=np.float64)
    cdef double[:, ::1] Se = np.ascontiguousarray(sigma_eta, dtype=np.float64)
    cdef double[::1] mm0 = np.ascontiguousarray(m0, dtype=np.float64)
    cdef double[:, ::1] PP0 = np.ascontiguousarray(P0, dtype=np.float64)
    cdef double[:, ::1] Z = np.ascontiguousarray(z, dtype=np.float64)

    cdef Py_ssize_t n = Y.shape[0], K = Y.shape[1], Q = Gm.shape[1]
    cdef Py_ssize_t nsub = off.shape[0] - 1

    a_arr = np.empty((n, Q))
    P_arr = np.empty((n, Q, Q))
    out_arr = np.empty((n, Q))
    cdef double[:, ::1] A = a_arr
    cdef double[:, :, ::1] P = P_arr
    cdef double[:, ::1] out = out_arr

    work = np.empty(5 * Q * Q + 3 * Q)
    cdef double[::1] W = work
    cdef double* Pm = &W[0]
    cdef double* L = &W[Q * Q]
    cdef double* Pp = &W[2 * Q * Q]
    cdef double* X = &W[3 * Q * Q]
    cdef double* R = &W[4 * Q * Q]
    cdef double* am = &W[5 * Q * Q]
    cdef double* v = &W[5 * Q * Q + Q]
    cdef double* d = &W[5 * Q * Q + 2 * Q]

    cdef Py_ssize_t s_i, r, r0, r1, i, j, k, l
    cdef double s, innov, tmp, delta
    cdef Py_ssize_t fail_row = -1
    cdef int fail_kind = 0

    with nogil:
        for s_i in range(nsub):
            r0 = off[s_i]
            r1 = off[s_i + 1]
            # forward pass
            for r in range(r0, r1):
                if r == r0:
                    for i in range(Q):
                        am[i] = mm0[i]
                        for j in range(Q):
                            Pm[i * Q + j] = PP0[i, j]
                else:
                    delta = dl[r]
                    for i in range(Q):
                        am[i] = A[r - 1, i]
                        for j in range(Q):
                            Pm[i * Q + j] = P[r - 1, i, j] + delta * Se[i, j]
                for k in range(K):
                    s = se[k]
                    innov = Y[r, k]
                    for i in range(Q):
                        tmp = 0.0
                        for j in range(Q):
                            tmp += Pm[i * Q + j] * Gm[k, j]
                        v[i] = tmp
                        s += tmp * Gm[k, i]
                        innov -= am[i] * Gm[k, i]
                    if s <= 0.0:
                        fail_row = r
                        fail_kind = 1
                        break
                    for i in range(Q):
                        am[i] += v[i] * innov / s
                        for j in range(Q):
                            Pm[i * Q + j] -= v[i] * v[j] / s
                if fail_kind:
                    break
                for i in range(Q):
                    A[r, i] = am[i]
                    for j in range(Q):
                        P[r, i, j] = 0.5 * (Pm[i * Q + j] + Pm[j * Q + i])
            if fail_kind:
                break

            # backward sampling
            r = r1 - 1
            for i in range(Q):
                for j in range(Q):
                    R[i * Q + j] = P[r, i, j]
            if _chol(R, L, Q) != 0:
                fail_row = r
                fail_kind = 2
                break
            for i in range(Q):
                tmp = A[r, i]
                for j in range(i + 1):
                    tmp += L[i * Q + j] * Z[r, j]
                out[r, i] = tmp
            for r in range(r1 - 2, r0 - 1, -1):
                delta = dl[r + 1]
                for i in range(Q):
                    for j in range(Q):
                        Pp[i * Q + j] = P[r, i, j] + delta * Se[i, j]
                        X[i * Q + j] = P[r, i, j]
                if _chol(Pp, L, Q) != 0:
                    fail_row = r
                    fail_kind = 2
                    break
                _chol_solve(L, X, Q, Q)          # X = Pp^{-1} P_r
                for i in range(Q):
                    d[i] = out[r + 1, i] - A[r, i]
                for i in range(Q):
                    tmp = A[r, i]
                    for l in range(Q):
                        tmp += X[l * Q + i] * d[l]
                    am[i] = tmp
                    for j in range(Q):
                        tmp = P[r, i, j]
                        for l in range(Q):
                            tmp -= X[l * Q + i] * P[r, l, j]
                        R[i * Q + j] = tmp
                for i in range(Q):
                    for j in range(i):
                        tmp = 0.5 * (R[i * Q + j] + R[j * Q + i])
                        R[i * Q + j] = tmp
                        R[j * Q + i] = tmp
                if _chol(R, L, Q) != 0:
                    fail_row = r
                    fail_kind = 2
                    break
                for i in range(Q):
                    tmp = am[i]
                    for j in range(i + 1):
                        tmp += L[i * Q + j] * Z[r, j]
                    out[r, i] = tmp
            if fail_kind:
                break

    if fail_kind == 1:
        raise KernelError(f"non-positive innovation variance at stacked visit row {fail_row}")
    if fail_kind == 2:
        raise KernelError(f"Cholesky failed at stacked visit row {fail_row}")
    return out_arr


def cox_breslow(time, event, X, beta):
    """Breslow log partial likelihood, gradient and Hessian (time sorted ascending)."""
    cdef double[::1] t = np.ascontiguousarray(time, dtype=np.float64)
    cdef cnp.int8_t[::1] ev = np.ascontiguousarray(event, dtype=np.int8)
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], p = x.shape[1]

    eta_arr = np.empty(n)
    w_arr = np.empty(n)
    s1_arr = np.zeros(p)
    s2_arr = np.zeros((p, p))
    grad_arr = np.zeros(p)
    hess_arr = np.zeros((p, p))
    cdef double[::1] eta = eta_arr, w = w_arr, s1 = s1_arr, grad = grad_arr
    cdef double[:, ::1] s2 = s2_arr, hess = hess_arr

    cdef Py_ssize_t i, j, k, g, gstart
    cdef double shift = -1e300, s0 = 0.0, loglik = 0.0, tmp, inv0

    with nogil:
        for i in range(n):
            tmp = 0.0
            for j in range(p):
                tmp += x[i, j] * b[j]
            eta[i] = tmp
            if tmp > shift:
                shift = tmp
        for i in range(n):
            w[i] = exp(eta[i] - shift)

        i = n - 1
        while i >= 0:
            # tie group [gstart, i]
            gstart = i
            while gstart > 0 and t[gstart - 1] == t[i]:
                gstart -= 1
            for g in range(gstart, i + 1):
                s0 += w[g]
                for j in range(p):
                    s1[j] += w[g] * x[g, j]
                    for k in range(j + 1):
                        s2[j, k] += w[g] * x[g, j] * x[g, k]
            inv0 = 1.0 / s0
            for g in range(gstart, i + 1):
                if ev[g]:
                    loglik += eta[g] - shift - log(s0)
                    for j in range(p):
                        grad[j] += x[g, j] - s1[j] * inv0
                        for k in range(j + 1):
                            hess[j, k] -= s2[j, k] * inv0 - s1[j] * s1[k] * inv0 * inv0
            i = gstart - 1

        for j in range(p):
            for k in range(j):
                hess[k, j] = hess[j, k]
    return loglik, grad_arr, hess_arr
