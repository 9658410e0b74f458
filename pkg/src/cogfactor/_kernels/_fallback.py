"""Pure numpy versions of the hot kernels.

Same algorithms and calling conventions as the compiled ``_core`` module.
The FFBS pass is vectorised across subjects by visit position; the Cox
derivatives use reverse cumulative sums over the time-sorted risk sets.
"""
import numpy as np

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class KernelError(ArithmeticError):
    pass


def _chol_batch(a, rows):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(a)
    eye = np.eye(a.shape[-1])
    for i in range(a.shape[0]):
        for jit in _JITTERS:
            try:
                out[i] = np.linalg.cholesky(a[i] + jit * eye)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise KernelError(f"Cholesky failed at stacked visit row {rows[i]}")
    return out


def ffbs_batch(y, offsets, deltas, G, sigma_eps, sigma_eta, m0, P0, z):
    """Forward filter then backward sample every subject's factor path.

    ``y`` is ``(n_visits, K)`` with subjects stacked; subject ``i`` owns rows
    ``offsets[i]:offsets[i+1]``.  ``deltas`` holds the gap in years before each
    visit and ``z`` the ``(n_visits, Q)`` standard normals consumed by the
    backward pass.  Observations are absorbed one test at a time, which is
    exact because the measurement noise is diagonal.
    """
    y = np.asarray(y, dtype=float)
    offsets = np.asarray(offsets, dtype=np.int64)
    n, K = y.shape
    Q = G.shape[1]
    lens = np.diff(offsets)
    jmax = int(lens.max()) if lens.size else 0
    a = np.empty((n, Q))
    P = np.empty((n, Q, Q))

    for j in range(jmax):
        rows = offsets[:-1][lens > j] + j
        if j == 0:
            am = np.broadcast_to(m0, (rows.size, Q)).copy()
            Pm = np.broadcast_to(P0, (rows.size, Q, Q)).copy()
        else:
            am = a[rows - 1].copy()
            Pm = P[rows - 1] + deltas[rows, None, None] * sigma_eta
        for k in range(K):
            h = G[k]
            v = Pm @ h
            s = v @ h + sigma_eps[k]
            if np.any(s <= 0):
                bad = rows[np.argmax(s <= 0)]
                raise KernelError(f"non-positive innovation variance at stacked visit row {bad}")
            innov = y[rows, k] - am @ h
            am += v * (innov / s)[:, None]
            Pm -= v[:, :, None] * v[:, None, :] / s[:, None, None]
        a[rows] = am
        P[rows] = 0.5 * (Pm + np.swapaxes(Pm, 1, 2))

    alpha = np.empty((n, Q))
    last = offsets[1:][lens > 0] - 1
    alpha[last] = a[last] + np.einsum("nij,nj->ni", _chol_batch(P[last], last), z[last])
    for j in range(jmax - 2, -1, -1):
        rows = offsets[:-1][lens > j + 1] + j
        nxt = rows + 1
        Pj = P[rows]
        Pp = Pj + deltas[nxt, None, None] * sigma_eta
        # X = Pp^{-1} P_j, gain = X'
        X = np.linalg.solve(Pp, Pj)
        gainT = np.swapaxes(X, 1, 2)
        m = a[rows] + np.einsum("nij,nj->ni", gainT, alpha[nxt] - a[rows])
        R = Pj - gainT @ Pj
        R = 0.5 * (R + np.swapaxes(R, 1, 2))
        alpha[rows] = m + np.einsum("nij,nj->ni", _chol_batch(R, rows), z[rows])
    return alpha


def cox_breslow(time, event, X, beta):
    """Breslow log partial likelihood, gradient and Hessian.

    ``time`` must be sorted ascending; ``event`` is 0/1.
    """
    time = np.asarray(time, dtype=float)
    ev = np.asarray(event).astype(bool)
    X = np.asarray(X, dtype=float)
    eta = X @ beta
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    # reverse cumulative sums give sums over {l : l >= i}
    s0 = np.cumsum(w[::-1])[::-1]
    wx = w[:, None] * X
    s1 = np.cumsum(wx[::-1], axis=0)[::-1]
    s2 = np.cumsum((wx[:, :, None] * X[:, None, :])[::-1], axis=0)[::-1]
    start = np.searchsorted(time, time, side="left")
    idx = start[ev]
    d0 = s0[idx]
    d1 = s1[idx] / d0[:, None]
    loglik = float(np.sum(eta[ev] - shift - np.log(d0)))
    grad = np.sum(X[ev] - d1, axis=0)
    hess = -(np.sum(s2[idx] / d0[:, None, None], axis=0) - d1.T @ d1)
    return loglik, grad, hess
