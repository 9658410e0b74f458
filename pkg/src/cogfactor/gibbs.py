"""Gibbs sampler for the structured longitudinal factor model.

Each iteration draws, in order: the factor paths of every subject by FFBS,
each row of the loading matrix, each measurement variance, and the factor
innovation covariance (rescaled to a correlation matrix).  Posterior
summaries are element-wise means over the post-burn-in draws.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .data_model import Cohort
from .state_space import StateSpaceParams, visit_deltas

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
SIGMA_EPS_FLOOR = 1e-12


class GibbsError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}" if iteration is not None else message)


class GibbsDivergenceError(GibbsError):
    pass


@dataclass(frozen=True)
class LoadingStructure:
    mask: np.ndarray
    factor_names: tuple[str, ...]

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        if mask.ndim != 2 or mask.shape[1] != len(self.factor_names):
            raise ValueError("mask must be K x Q with one name per factor column")
        if not mask.any(axis=1).all() or not mask.any(axis=0).all():
            raise ValueError("every test and every factor needs at least one loading")

    @property
    def n_tests(self) -> int:
        return self.mask.shape[0]

    @property
    def n_factors(self) -> int:
        return self.mask.shape[1]

    def anchors(self) -> np.ndarray:
        """First masked-in test of each factor; its loading is kept non-negative."""
        return np.argmax(self.mask, axis=0)

    @classmethod
    def from_assignment(cls, assignment: Sequence[int], factor_names: Sequence[str]) -> "LoadingStructure":
        mask = np.zeros((len(assignment), len(factor_names)), dtype=bool)
        mask[np.arange(len(assignment)), list(assignment)] = True
        return cls(mask, tuple(factor_names))

    def __eq__(self, other):
        return (isinstance(other, LoadingStructure) and self.factor_names == other.factor_names
                and np.array_equal(self.mask, other.mask))

    def __hash__(self):
        return hash((self.factor_names, self.mask.tobytes()))


FACTOR_NAMES = ("memory", "working_memory", "language", "psychomotor_speed")


def battery_structure() -> LoadingStructure:
    """Recall tests -> memory, digit spans -> working memory, fluency and naming
    -> language, trails and digit symbol -> psychomotor speed."""
    return LoadingStructure.from_assignment([0, 0, 1, 1, 2, 2, 2, 3, 3, 3], FACTOR_NAMES)


@dataclass
class Priors:
    m0: np.ndarray
    P0: np.ndarray
    mu: np.ndarray            # (K, Q) prior mean of each loading row
    sigma2_g: np.ndarray      # (K,) isotropic prior variance per row
    c0: np.ndarray            # (K,)
    d0: np.ndarray            # (K,)
    nu_eta: float
    Lambda_eta: np.ndarray

    @classmethod
    def default(cls, n_tests: int, n_factors: int) -> "Priors":
        K, Q = n_tests, n_factors
        return cls(m0=np.zeros(Q), P0=10.0 * np.eye(Q), mu=np.zeros((K, Q)),
                   sigma2_g=np.ones(K), c0=np.full(K, 0.01), d0=np.full(K, 0.01),
                   nu_eta=Q + 2.0, Lambda_eta=np.eye(Q))

    def validate(self, n_tests: int, n_factors: int) -> None:
        if self.nu_eta <= n_factors - 1:
            raise ValueError(f"nu_eta must exceed Q - 1 = {n_factors - 1}")
        if self.mu.shape != (n_tests, n_factors):
            raise ValueError("prior loading means must be K x Q")
        if np.any(np.asarray(self.sigma2_g) <= 0):
            raise ValueError("sigma2_g must be positive")


@dataclass
class GibbsConfig:
    n_iter: int = 10_000
    burn_in: int = 5_000
    loading_structure: LoadingStructure = field(default_factory=battery_structure)
    priors: Priors | None = None
    seed: int = 0
    thin: int = 0                 # keep every thin-th retained draw; 0 keeps none
    backend: str | None = None

    @classmethod
    def desk(cls, **kw) -> "GibbsConfig":
        return cls(n_iter=2_000, burn_in=1_000, **kw)

    def resolved_priors(self) -> Priors:
        s = self.loading_structure
        return self.priors if self.priors is not None else Priors.default(s.n_tests, s.n_factors)

    def validate(self) -> None:
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        s = self.loading_structure
        self.resolved_priors().validate(s.n_tests, s.n_factors)


# ---------------------------------------------------------------------------
# conditional samplers


def loading_row_posterior(k: int, alphas: np.ndarray, y_star: np.ndarray, sigma_eps_k: float,
                          priors: Priors, mask_row: np.ndarray):
    """Posterior mean and covariance of row ``k`` over its masked-in coordinates.

    With ``A`` the masked-in factor draws, the precision is
    ``Sigma_alpha / (s2g * s2e)`` with ``Sigma_alpha = s2g A'A + s2e I`` and the
    mean is ``Sigma_alpha^{-1} (s2e mu + s2g A'y)``.
    """
    idx = np.flatnonzero(mask_row)
    a = alphas[:, idx]
    s2g = float(np.broadcast_to(priors.sigma2_g, (priors.mu.shape[0],))[k])
    s2e = float(sigma_eps_k)
    sigma_alpha = s2g * (a.T @ a) + s2e * np.eye(idx.size)
    rhs = s2e * priors.mu[k, idx] + s2g * (a.T @ y_star[:, k])
    try:
        L = np.linalg.cholesky(sigma_alpha)
    except np.linalg.LinAlgError:
        raise GibbsError(f"Sigma_alpha for loading row {k} is singular") from None
    mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    Linv = np.linalg.solve(L, np.eye(idx.size))
    cov = s2g * s2e * (Linv.T @ Linv)
    return idx, mean, cov


def sample_loading_row(k: int, alphas: np.ndarray, y_star: np.ndarray, sigma_eps_k: float,
                       priors: Priors, mask_row: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw loading row ``k``; masked-out entries are exactly zero."""
    idx, mean, cov = loading_row_posterior(k, alphas, y_star, sigma_eps_k, priors, mask_row)
    g = np.zeros(len(mask_row))
    g[idx] = mean + np.linalg.cholesky(cov) @ rng.standard_normal(idx.size)
    return g


def sigma_eps_posterior(k: int, alphas: np.ndarray, y_star: np.ndarray, G: np.ndarray,
                        priors: Priors) -> tuple[float, float]:
    """Inverse-gamma (shape, rate) for the measurement variance of test ``k``."""
    resid = y_star[:, k] - alphas @ G[k]
    shape = 0.5 * (resid.size + priors.c0[k])
    rate = 0.5 * (priors.d0[k] + resid @ resid)
    return float(shape), float(rate)


def sample_sigma_eps(k: int, alphas: np.ndarray, y_star: np.ndarray, G: np.ndarray,
                     priors: Priors, rng: np.random.Generator) -> float:
    shape, rate = sigma_eps_posterior(k, alphas, y_star, G, priors)
    return max(rate / rng.gamma(shape), SIGMA_EPS_FLOOR)


def scaled_increments(alphas: np.ndarray, deltas: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-unit-time factor increments ``(alpha_j - alpha_{j-1}) / sqrt(delta_j)``."""
    first = np.zeros(alphas.shape[0], dtype=bool)
    first[offsets[:-1]] = True
    later = np.flatnonzero(~first)
    return (alphas[later] - alphas[later - 1]) / np.sqrt(deltas[later])[:, None]


def to_correlation(s: np.ndarray) -> np.ndarray:
    d = 1.0 / np.sqrt(np.diag(s))
    c = s * d[:, None] * d[None, :]
    c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


def sigma_eta_posterior(increments: np.ndarray, priors: Priors) -> tuple[float, np.ndarray]:
    """Inverse-Wishart (dof, scale) given the scaled increments."""
    scatter = priors.Lambda_eta + increments.T @ increments
    if np.linalg.eigvalsh(0.5 * (scatter + scatter.T)).min() < 0:
        raise GibbsError("Sigma_eta scatter matrix is not positive semidefinite")
    return priors.nu_eta + increments.shape[0], scatter


def sample_sigma_eta(alphas: np.ndarray, deltas: np.ndarray, offsets: np.ndarray,
                     priors: Priors, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw rescaled to unit diagonal."""
    dof, scatter = sigma_eta_posterior(scaled_increments(alphas, deltas, offsets), priors)
    q = scatter.shape[0]
    draw = np.atleast_2d(stats.invwishart.rvs(df=dof, scale=scatter, random_state=rng)).reshape(q, q)
    return to_correlation(draw)


def align_signs(G: np.ndarray, alphas: np.ndarray, sigma_eta: np.ndarray,
                anchors: np.ndarray) -> np.ndarray:
    """Flip factor columns whose anchor loading is negative, in place.

    The flip negates the loading column, the factor paths and the matching
    row/column of ``sigma_eta`` together, which leaves the likelihood unchanged.
    Returns the flipped column indices.
    """
    flip = np.flatnonzero(G[anchors, np.arange(G.shape[1])] < 0)
    if flip.size:
        G[:, flip] *= -1.0
        alphas[:, flip] *= -1.0
        sigma_eta[flip, :] *= -1.0
        sigma_eta[:, flip] *= -1.0
    return flip


# ---------------------------------------------------------------------------
# summaries


def split_rhat(draws: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction for each column of ``draws``."""
    n = draws.shape[0] // 2
    if n < 2:
        return np.full(draws.shape[1], np.nan)
    chains = np.stack([draws[:n], draws[n:2 * n]])
    w = chains.var(axis=1, ddof=1).mean(axis=0)
    b = n * chains.mean(axis=1).var(axis=0, ddof=1)
    var_hat = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / w)
    return np.where(w > 0, r, 1.0)


@dataclass(eq=False)
class PosteriorSummary:
    G_hat: np.ndarray
    sigma_eps_hat: np.ndarray
    sigma_eta_hat: np.ndarray
    factor_scores: np.ndarray            # (n_visits, Q) posterior means, stacked by subject
    subject_ids: list[str]
    visit_days: np.ndarray               # (n_visits,)
    offsets: np.ndarray
    test_names: list[str]
    factor_names: list[str]
    n_iter: int
    burn_in: int
    seed: int
    diagnostics: dict = field(default_factory=dict)
    retained_draws: dict | None = None

    @property
    def n_retained(self) -> int:
        return self.n_iter - self.burn_in

    def params(self, priors: Priors | None = None) -> StateSpaceParams:
        """Posterior-mean state-space parameters with the given state prior."""
        q = self.G_hat.shape[1]
        priors = priors or Priors.default(self.G_hat.shape[0], q)
        return StateSpaceParams(self.G_hat, self.sigma_eps_hat, self.sigma_eta_hat, priors.m0, priors.P0)

    def scores_for(self, subject_id: str) -> np.ndarray:
        i = self.subject_ids.index(subject_id)
        return self.factor_scores[self.offsets[i]:self.offsets[i + 1]]

    def to_dict(self) -> dict:
        return {
            "G_hat": self.G_hat.tolist(),
            "sigma_eps_hat": self.sigma_eps_hat.tolist(),
            "sigma_eta_hat": self.sigma_eta_hat.tolist(),
            "test_names": list(self.test_names),
            "factor_names": list(self.factor_names),
            "n_iter": self.n_iter,
            "burn_in": self.burn_in,
            "seed": self.seed,
            "diagnostics": self.diagnostics,
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def write_factor_scores(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "visit_days"] + [f"factor_{q + 1}" for q in range(len(self.factor_names))])
            for i, sid in enumerate(self.subject_ids):
                for r in range(self.offsets[i], self.offsets[i + 1]):
                    w.writerow([sid, repr(float(self.visit_days[r]))]
                               + [repr(float(v)) for v in self.factor_scores[r]])
        return path

    @classmethod
    def read(cls, json_path: str | Path, scores_path: str | Path) -> "PosteriorSummary":
        d = json.loads(Path(json_path).read_text())
        ids, days, scores = [], [], []
        with Path(scores_path).open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                ids.append(row[0])
                days.append(float(row[1]))
                scores.append([float(v) for v in row[2:]])
        uniq, offsets = [], [0]
        for i, sid in enumerate(ids):
            if not uniq or uniq[-1] != sid:
                if uniq:
                    offsets.append(i)
                uniq.append(sid)
        offsets.append(len(ids))
        q = len(d["factor_names"])
        return cls(np.array(d["G_hat"]), np.array(d["sigma_eps_hat"]), np.array(d["sigma_eta_hat"]),
                   np.array(scores).reshape(-1, q), uniq, np.array(days), np.array(offsets),
                   d["test_names"], d["factor_names"], d["n_iter"], d["burn_in"], d["seed"],
                   d.get("diagnostics", {}))


# ---------------------------------------------------------------------------
# driver


def stacked_inputs(cohort: Cohort) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked scores, subject offsets and per-visit gaps in years."""
    y = cohort.stacked_scores()
    offsets = np.concatenate([[0], np.cumsum([s.n_visits for s in cohort.subjects])]).astype(np.int64)
    deltas = np.concatenate([visit_deltas(s.visit_times) for s in cohort.subjects]) if cohort.subjects \
        else np.empty(0)
    return y, offsets, deltas


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))


def initial_loadings(structure: LoadingStructure, value: float = 0.7) -> np.ndarray:
    return structure.mask * value


def run_gibbs(cohort: Cohort, config: GibbsConfig, progress: bool = False) -> PosteriorSummary:
    """Run the sampler on a standardized, covariate-adjusted cohort."""
    config.validate()
    structure = config.loading_structure
    priors = config.resolved_priors()
    K, Q = structure.mask.shape
    if cohort.schema.n_tests != K:
        raise ValueError(f"cohort has {cohort.schema.n_tests} tests, loading structure has {K}")
    if not cohort.subjects:
        raise ValueError("cannot fit an empty cohort")
    kernels = _kernels.get_backend(config.backend) if config.backend else _kernels

    y, offsets, deltas = stacked_inputs(cohort)
    n = y.shape[0]
    anchors = structure.anchors()
    G = initial_loadings(structure)
    sigma_eps = np.full(K, 0.5)
    sigma_eta = np.eye(Q)

    n_keep = config.n_iter - config.burn_in
    sum_G = np.zeros((K, Q))
    sum_eps = np.zeros(K)
    sum_eta = np.zeros((Q, Q))
    sum_alpha = np.zeros((n, Q))
    tri = np.tril_indices(Q, -1)
    trace = np.empty((n_keep, int(structure.mask.sum()) + K + tri[0].size))
    keep_draws = config.thin > 0
    draws: dict[str, list] = {"G": [], "sigma_eps": [], "sigma_eta": []}

    for it in range(config.n_iter):
        rng = iteration_rng(config.seed, it)
        try:
            z = rng.standard_normal((n, Q))
            alphas = kernels.ffbs_batch(y, offsets, deltas, G, sigma_eps, sigma_eta,
                                        priors.m0, priors.P0, z)
            for k in range(K):
                G[k] = sample_loading_row(k, alphas, y, sigma_eps[k], priors, structure.mask[k], rng)
            for k in range(K):
                sigma_eps[k] = sample_sigma_eps(k, alphas, y, G, priors, rng)
            sigma_eta = sample_sigma_eta(alphas, deltas, offsets, priors, rng)
        except GibbsError as exc:
            raise GibbsError(str(exc), it) from exc
        except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            raise GibbsError(f"{type(exc).__name__}: {exc}", it) from exc
        align_signs(G, alphas, sigma_eta, anchors)

        worst = max(np.abs(G).max(), sigma_eps.max(), np.abs(alphas).max())
        if not np.isfinite(worst) or worst > DIVERGENCE_LIMIT:
            raise GibbsDivergenceError(f"chain diverged (max |parameter| = {worst:.3g})", it)

        if it >= config.burn_in:
            r = it - config.burn_in
            sum_G += G
            sum_eps += sigma_eps
            sum_eta += sigma_eta
            sum_alpha += alphas
            trace[r] = np.concatenate([G[structure.mask], sigma_eps, sigma_eta[tri]])
            if keep_draws and r % config.thin == 0:
                draws["G"].append(G.copy())
                draws["sigma_eps"].append(sigma_eps.copy())
                draws["sigma_eta"].append(sigma_eta.copy())
        if progress and (it + 1) % max(1, config.n_iter // 10) == 0:
            log.info("gibbs iteration %d/%d", it + 1, config.n_iter)

    names = ([f"G[{k},{q}]" for k, q in zip(*np.nonzero(structure.mask))]
             + [f"sigma_eps[{k}]" for k in range(K)]
             + [f"sigma_eta[{i},{j}]" for i, j in zip(*tri)])
    rhat = split_rhat(trace)
    diagnostics = {
        "backend": kernels.BACKEND if kernels is _kernels else config.backend,
        "parameters": {
            name: {"mean": float(trace[:, c].mean()), "sd": float(trace[:, c].std()),
                   "split_rhat": float(rhat[c])}
            for c, name in enumerate(names)
        },
        "max_split_rhat": float(np.nanmax(rhat)) if np.isfinite(rhat).any() else float("nan"),
    }
    retained = {k: np.array(v) for k, v in draws.items()} if keep_draws else None
    sigma_eta_hat = sum_eta / n_keep
    np.fill_diagonal(sigma_eta_hat, 1.0)
    return PosteriorSummary(
        G_hat=sum_G / n_keep,
        sigma_eps_hat=sum_eps / n_keep,
        sigma_eta_hat=sigma_eta_hat,
        factor_scores=sum_alpha / n_keep,
        subject_ids=[s.subject_id for s in cohort.subjects],
        visit_days=np.concatenate([s.visit_times for s in cohort.subjects]),
        offsets=offsets,
        test_names=cohort.schema.test_names,
        factor_names=list(structure.factor_names),
        n_iter=config.n_iter,
        burn_in=config.burn_in,
        seed=config.seed,
        diagnostics=diagnostics,
        retained_draws=retained,
    )
