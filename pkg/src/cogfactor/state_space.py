"""Kalman filter, smoother and backward sampler for the latent factor random walk.

Per subject the model is::

    y_j     = G alpha_j + eps_j,            eps_j ~ N(0, diag(sigma_eps))
    alpha_j = alpha_{j-1} + eta_j,          eta_j ~ N(0, delta_j * sigma_eta)
    alpha_1 ~ N(m0, P0)

with ``delta_j`` the gap between visits ``j-1`` and ``j`` in years.  The
functions here work on one subject at a time and favour clarity; the Gibbs
sampler runs the batched kernels in :mod:`cogfactor._kernels`, which are
checked against these.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data_model import DAYS_PER_YEAR, SubjectSeries

LOG_2PI = np.log(2.0 * np.pi)
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
ORACLE_MAX_DIM = 50


class StateSpaceError(ArithmeticError):
    pass


@dataclass
class StateSpaceParams:
    G: np.ndarray
    sigma_eps: np.ndarray
    sigma_eta: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.sigma_eps = np.atleast_1d(np.asarray(self.sigma_eps, dtype=float))
        self.sigma_eta = np.atleast_2d(np.asarray(self.sigma_eta, dtype=float))
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        k, q = self.G.shape
        if self.sigma_eps.shape != (k,):
            raise ValueError(f"sigma_eps must have length {k}")
        if self.sigma_eta.shape != (q, q) or self.P0.shape != (q, q) or self.m0.shape != (q,):
            raise ValueError(f"state quantities must be {q}-dimensional")

    @property
    def n_tests(self) -> int:
        return self.G.shape[0]

    @property
    def n_factors(self) -> int:
        return self.G.shape[1]

    @classmethod
    def default(cls, G, sigma_eps, sigma_eta=None, prior_var: float = 10.0) -> "StateSpaceParams":
        G = np.atleast_2d(np.asarray(G, dtype=float))
        q = G.shape[1]
        sigma_eta = np.eye(q) if sigma_eta is None else sigma_eta
        return cls(G, sigma_eps, sigma_eta, np.zeros(q), prior_var * np.eye(q))

    def validate(self, require_unit_diagonal: bool = False) -> None:
        """Raise ``ValueError`` if the parameters violate the model constraints."""
        if np.any(self.sigma_eps <= 0):
            raise ValueError("sigma_eps entries must be positive")
        for name, m in (("sigma_eta", self.sigma_eta), ("P0", self.P0)):
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError(f"{name} must be positive definite")
        if require_unit_diagonal and not np.allclose(np.diag(self.sigma_eta), 1.0):
            raise ValueError("sigma_eta must have unit diagonal")


@dataclass
class FilterResult:
    deltas: np.ndarray        # (J,) gap before each visit in years; 0 for the first
    y: np.ndarray             # (J, K) observations the filter ran on
    pred_means: np.ndarray    # (J, Q)
    pred_covs: np.ndarray     # (J, Q, Q)
    means: np.ndarray         # (J, Q)  alpha_{j|j}
    covs: np.ndarray          # (J, Q, Q)  P_{j|j}
    log_likelihood: float

    @property
    def n_visits(self) -> int:
        return self.means.shape[0]


@dataclass
class SmootherResult:
    means: np.ndarray         # (J, Q)
    covs: np.ndarray          # (J, Q, Q)
    gains: np.ndarray         # (J, Q, Q); last entry unused


@dataclass
class FactorTrajectory:
    values: np.ndarray        # (J, Q)
    kind: Literal["smoothed_mean", "draw"]

    def __len__(self) -> int:
        return self.values.shape[0]


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def chol_jitter(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter from 1e-10 to 1e-6."""
    eye = np.eye(a.shape[-1])
    for j in JITTERS:
        try:
            return np.linalg.cholesky(a + j * eye)
        except np.linalg.LinAlgError:
            continue
    raise StateSpaceError(f"Cholesky factorization of {what} failed even with jitter 1e-6")


def visit_deltas(visit_times_days: np.ndarray) -> np.ndarray:
    """Gap before each visit in years, with 0 in the first slot."""
    t = np.asarray(visit_times_days, dtype=float)
    return np.concatenate([[0.0], np.diff(t) / DAYS_PER_YEAR])


def _series_arrays(series) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(series, SubjectSeries):
        return series.scores, visit_deltas(series.visit_times)
    y, deltas = series
    return np.atleast_2d(np.asarray(y, dtype=float)), np.asarray(deltas, dtype=float)


def kalman_filter(series: SubjectSeries | tuple, params: StateSpaceParams) -> FilterResult:
    """Forward pass with Joseph-form updates and the exact Gaussian log-likelihood.

    ``series`` may also be a ``(y, deltas)`` pair, where ``deltas[j]`` is the
    gap in years before visit ``j`` (``deltas[0]`` is ignored).
    """
    y, deltas = _series_arrays(series)
    J = y.shape[0]
    if J == 0:
        raise StateSpaceError("cannot filter a series with zero visits")
    K, Q = params.G.shape
    if y.shape[1] != K:
        raise ValueError(f"series has {y.shape[1]} tests but G has {K} rows")
    G, D = params.G, np.diag(params.sigma_eps)
    eye = np.eye(Q)

    pred_m = np.empty((J, Q))
    pred_P = np.empty((J, Q, Q))
    means = np.empty((J, Q))
    covs = np.empty((J, Q, Q))
    loglik = 0.0
    a, P = params.m0, params.P0
    for j in range(J):
        if j > 0:
            a, P = means[j - 1], covs[j - 1] + deltas[j] * params.sigma_eta
        pred_m[j], pred_P[j] = a, P
        S = symmetrize(G @ P @ G.T + D)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise StateSpaceError(f"innovation covariance not positive definite at visit {j}") from None
        v = y[j] - G @ a
        # K_gain = P G' S^{-1}
        gain = np.linalg.solve(L.T, np.linalg.solve(L, G @ P)).T
        w = np.linalg.solve(L, v)
        loglik -= 0.5 * (K * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + w @ w)
        a = a + gain @ v
        IKG = eye - gain @ G
        P = symmetrize(IKG @ P @ IKG.T + gain @ D @ gain.T)
        means[j], covs[j] = a, P
    return FilterResult(deltas, y, pred_m, pred_P, means, covs, float(loglik))


def kalman_smoother(filt: FilterResult, params: StateSpaceParams) -> SmootherResult:
    """Rauch-Tung-Striebel backward pass giving smoothed marginals per visit."""
    J, Q = filt.means.shape
    if params.n_factors != Q:
        raise ValueError(f"filter has {Q} factors but params have {params.n_factors}")
    means = filt.means.copy()
    covs = filt.covs.copy()
    gains = np.zeros((J, Q, Q))
    for j in range(J - 2, -1, -1):
        Pp = filt.pred_covs[j + 1]
        gain = np.linalg.solve(Pp, filt.covs[j]).T
        gains[j] = gain
        means[j] = filt.means[j] + gain @ (means[j + 1] - filt.pred_means[j + 1])
        covs[j] = symmetrize(filt.covs[j] + gain @ (covs[j + 1] - Pp) @ gain.T)
    return SmootherResult(means, covs, gains)


def backward_conditionals(filt: FilterResult, j: int, alpha_next: np.ndarray):
    """Mean and covariance of ``alpha_j`` given ``y_{1:j}`` and ``alpha_{j+1}``."""
    P = filt.covs[j]
    Pp = filt.pred_covs[j + 1]
    gain = np.linalg.solve(Pp, P).T
    m = filt.means[j] + gain @ (alpha_next - filt.means[j])
    R = symmetrize(P - gain @ P)
    return m, R


def backward_sample(filt: FilterResult, params: StateSpaceParams, z: np.ndarray) -> np.ndarray:
    """Backward sampling pass driven by standard normals ``z`` of shape ``(J, Q)``."""
    J, Q = filt.means.shape
    out = np.empty((J, Q))
    L = chol_jitter(filt.covs[-1], f"R at visit {J - 1}")
    out[-1] = filt.means[-1] + L @ z[-1]
    for j in range(J - 2, -1, -1):
        m, R = backward_conditionals(filt, j, out[j + 1])
        out[j] = m + chol_jitter(R, f"R at visit {j}") @ z[j]
    return out


def ffbs_sample(filt: FilterResult, params: StateSpaceParams,
                rng: np.random.Generator) -> FactorTrajectory:
    """Draw a full factor trajectory from its joint posterior."""
    z = rng.standard_normal(filt.means.shape)
    return FactorTrajectory(backward_sample(filt, params, z), "draw")


def smoothed_trajectory(series, params: StateSpaceParams) -> FactorTrajectory:
    return FactorTrajectory(kalman_smoother(kalman_filter(series, params), params).means,
                            "smoothed_mean")


# ---------------------------------------------------------------------------
# dense oracle


def _stacked_prior(deltas: np.ndarray, params: StateSpaceParams):
    J = deltas.shape[0]
    Q = params.n_factors
    elapsed = np.concatenate([[0.0], np.cumsum(deltas[1:])])
    mean = np.tile(params.m0, J)
    cov = np.empty((J * Q, J * Q))
    for i in range(J):
        for j in range(J):
            cov[i * Q:(i + 1) * Q, j * Q:(j + 1) * Q] = params.P0 + elapsed[min(i, j)] * params.sigma_eta
    H = np.kron(np.eye(J), params.G)
    noise = np.kron(np.eye(J), np.diag(params.sigma_eps))
    return mean, cov, H, noise


def joint_gaussian_oracle(series, params: StateSpaceParams) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior of the stacked states by dense Gaussian conditioning.

    Returns the ``(J*Q,)`` mean and ``(J*Q, J*Q)`` covariance of
    ``(alpha_1, ..., alpha_J)`` given all observations.
    """
    y, deltas = _series_arrays(series)
    J = y.shape[0]
    if J == 0:
        raise StateSpaceError("cannot condition on zero visits")
    if J * (params.n_factors + params.n_tests) > ORACLE_MAX_DIM:
        raise ValueError(f"oracle limited to {ORACLE_MAX_DIM} stacked dimensions")
    mean, cov, H, noise = _stacked_prior(deltas, params)
    syy = H @ cov @ H.T + noise
    sxy = cov @ H.T
    resid = y.reshape(-1) - H @ mean
    post_mean = mean + sxy @ np.linalg.solve(syy, resid)
    post_cov = cov - sxy @ np.linalg.solve(syy, sxy.T)
    return post_mean, symmetrize(post_cov)


def joint_log_likelihood(series, params: StateSpaceParams) -> float:
    """Dense multivariate-normal log density of the stacked observations."""
    y, deltas = _series_arrays(series)
    if y.shape[0] * (params.n_factors + params.n_tests) > ORACLE_MAX_DIM:
        raise ValueError(f"oracle limited to {ORACLE_MAX_DIM} stacked dimensions")
    mean, cov, H, noise = _stacked_prior(deltas, params)
    syy = H @ cov @ H.T + noise
    r = y.reshape(-1) - H @ mean
    sign, logdet = np.linalg.slogdet(syy)
    return float(-0.5 * (r.size * LOG_2PI + logdet + r @ np.linalg.solve(syy, r)))
