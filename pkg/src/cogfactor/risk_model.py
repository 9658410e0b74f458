"""Logistic risk models for three-year conversion.

Fits are maximum likelihood by Newton/IRLS with step-halving on internally
standardized predictors, with Wald standard errors mapped back to the
original scale.  Around the fitter sit the dataset builders (prediction visit
roughly three years before the endpoint for training, trial baseline for the
test set), factor pruning, threshold selection and high-risk subsets.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import norm

from .data_model import DAYS_PER_YEAR, Cohort
from .state_space import StateSpaceParams, kalman_filter

log = logging.getLogger(__name__)

Z_975 = float(norm.ppf(0.975))
SEPARATION_LIMIT = 15.0
GRID = np.round(np.arange(1, 1000) * 0.001, 3)


class RiskModelError(ValueError):
    pass


class SeparationError(RiskModelError):
    pass


@dataclass
class RiskDataset:
    """Per-subject predictors (by column name) and a binary outcome."""

    columns: dict[str, np.ndarray]
    outcome: np.ndarray
    subject_ids: list[str]

    def __post_init__(self):
        self.outcome = np.asarray(self.outcome, dtype=float)
        n = self.outcome.shape[0]
        if not np.isin(self.outcome, (0.0, 1.0)).all():
            raise RiskModelError("outcome must be 0/1")
        for name, col in self.columns.items():
            col = np.asarray(col, dtype=float)
            if col.shape != (n,):
                raise RiskModelError(f"column {name!r} has shape {col.shape}, expected ({n},)")
            if not np.isfinite(col).all():
                raise RiskModelError(f"column {name!r} has missing values")
            self.columns[name] = col

    def __len__(self) -> int:
        return self.outcome.shape[0]

    def design(self, terms: Sequence[str]) -> np.ndarray:
        """Intercept followed by the named columns."""
        return np.column_stack([np.ones(len(self))] + [self.columns[t] for t in terms])

    def subset(self, mask: np.ndarray) -> "RiskDataset":
        mask = np.asarray(mask, dtype=bool)
        return RiskDataset({k: v[mask] for k, v in self.columns.items()}, self.outcome[mask],
                           [s for s, m in zip(self.subject_ids, mask) if m])


@dataclass
class LogisticFit:
    terms: list[str]                  # predictor names; coefficient 0 is the intercept
    coefficients: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    converged: bool
    n_iter: int
    n_obs: int
    threshold: float = 0.5
    flags: list[str] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return ["intercept"] + self.terms

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def wald_p(self) -> np.ndarray:
        z = self.coefficients / self.std_errors
        return 2.0 * norm.sf(np.abs(z))

    def coef(self, term: str) -> float:
        return float(self.coefficients[self.names.index(term)])

    def p_value(self, term: str) -> float:
        return float(self.wald_p[self.names.index(term)])

    def odds_ratio(self, term: str) -> tuple[float, float, float]:
        """Odds ratio with its 95% Wald interval."""
        i = self.names.index(term)
        b, se = self.coefficients[i], self.std_errors[i]
        return math.exp(b), math.exp(b - Z_975 * se), math.exp(b + Z_975 * se)

    def linear_predictor(self, data: RiskDataset) -> np.ndarray:
        return data.design(self.terms) @ self.coefficients

    def predict_proba(self, data: RiskDataset) -> np.ndarray:
        return expit(self.linear_predictor(data))

    def to_dict(self) -> dict:
        return {
            "terms": self.names,
            "coefficients": self.coefficients.tolist(),
            "std_errors": self.std_errors.tolist(),
            "wald_p": self.wald_p.tolist(),
            "covariance": self.covariance.tolist(),
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "n_obs": self.n_obs,
            "threshold": self.threshold,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticFit":
        return cls(list(d["terms"][1:]), np.array(d["coefficients"]), np.array(d["covariance"]),
                   d["log_likelihood"], d["converged"], d["n_iter"], d["n_obs"],
                   d.get("threshold", 0.5), list(d.get("flags", [])))


# ---------------------------------------------------------------------------
# likelihood and fitting


def logistic_loglik(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def logistic_gradient(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return X.T @ (y - expit(X @ beta))


def logistic_hessian(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    p = expit(X @ beta)
    return -(X * (p * (1.0 - p))[:, None]).T @ X


def fit_logistic(data: RiskDataset, terms: Sequence[str], tol: float = 1e-8,
                 max_iter: int = 100) -> LogisticFit:
    """Maximum likelihood logistic regression of the outcome on ``terms``."""
    terms = list(terms)
    y = data.outcome
    n = y.shape[0]
    if n == 0 or y.min() == y.max():
        raise RiskModelError("both outcome classes must be present")
    X = data.design(terms)
    # standardize non-intercept columns; fitted probabilities are unaffected
    mu = np.zeros(X.shape[1])
    sd = np.ones(X.shape[1])
    if terms:
        mu[1:] = X[:, 1:].mean(axis=0)
        sd[1:] = X[:, 1:].std(axis=0)
        if np.any(sd[1:] == 0):
            const = [t for t, s in zip(terms, sd[1:]) if s == 0]
            raise RiskModelError("rank-deficient design; constant columns: " + ", ".join(const))
    Z = (X - mu) / sd
    Z[:, 0] = 1.0
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RiskModelError("rank-deficient design matrix")

    b = np.zeros(Z.shape[1])
    rate = y.mean()
    b[0] = math.log(rate / (1.0 - rate))
    ll = logistic_loglik(b, Z, y)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = logistic_gradient(b, Z, y)
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        H = -logistic_hessian(b, Z)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = b + t * step
            ll_new = logistic_loglik(cand, Z, y)
            if ll_new >= ll or t < 1e-10:
                break
            t *= 0.5
        b, ll = cand, ll_new
        if np.any(np.abs(b[1:]) > SEPARATION_LIMIT):
            raise SeparationError("coefficients diverging; outcome is (quasi-)separated by: "
                                  + ", ".join(t_ for t_, v in zip(terms, b[1:]) if abs(v) > SEPARATION_LIMIT))
    else:
        converged = np.linalg.norm(logistic_gradient(b, Z, y)) < tol

    # map back: beta = A b
    A = np.diag(1.0 / sd)
    A[0, 1:] = -mu[1:] / sd[1:]
    beta = A @ b
    cov_std = np.linalg.inv(-logistic_hessian(b, Z))
    cov = A @ cov_std @ A.T
    fit = LogisticFit(terms, beta, 0.5 * (cov + cov.T), float(ll), bool(converged), it, n)
    if not converged:
        fit.flags.append("not_converged")
    return fit


def select_final_model(full_fit: LogisticFit, data: RiskDataset, factor_terms: Sequence[str],
                       alpha: float = 0.05) -> LogisticFit:
    """Drop factors with Wald p >= alpha (covariates always stay) and refit once."""
    factor_terms = list(factor_terms)
    missing = [t for t in factor_terms if t not in full_fit.terms]
    if missing:
        raise RiskModelError("full model lacks factor terms: " + ", ".join(missing))
    keep = [t for t in full_fit.terms if t not in factor_terms or full_fit.p_value(t) < alpha]
    if keep == full_fit.terms:
        return full_fit
    final = fit_logistic(data, keep)
    if not any(t in factor_terms for t in keep):
        warnings.warn("no factor reached significance; final model is covariate-only")
        final.flags.append("covariate_only")
    return final


class ClassificationMetrics(NamedTuple):
    sensitivity: float
    specificity: float
    flag: str | None = None


def _metrics(prob: np.ndarray, outcome: np.ndarray, threshold: float) -> ClassificationMetrics:
    pos = prob >= threshold
    y = outcome.astype(bool)
    n_pos, n_neg = y.sum(), (~y).sum()
    flag = None
    if n_pos:
        sens = float((pos & y).sum() / n_pos)
    else:
        sens, flag = float("nan"), "no_positives"
    if n_neg:
        spec = float((~pos & ~y).sum() / n_neg)
    else:
        spec, flag = float("nan"), flag or "no_negatives"
    return ClassificationMetrics(sens, spec, flag)


def classification_metrics(fit: LogisticFit, data: RiskDataset, threshold: float) -> ClassificationMetrics:
    """Sensitivity and specificity calling predicted probability >= threshold positive."""
    if not 0.0 <= threshold <= 1.0:
        raise RiskModelError("threshold must lie in [0, 1]")
    return _metrics(fit.predict_proba(data), data.outcome, threshold)


class BalancedThreshold(NamedTuple):
    threshold: float
    sensitivity: float
    specificity: float
    uninformative: bool


def balanced_threshold_from_probs(prob: np.ndarray, outcome: np.ndarray) -> BalancedThreshold:
    y = outcome.astype(bool)
    if y.all() or not y.any():
        raise RiskModelError("both outcome classes are needed to balance sensitivity and specificity")
    # vectorised scan: counts of probabilities >= each grid point per class
    ps = np.sort(prob[y])
    ns = np.sort(prob[~y])
    sens = 1.0 - np.searchsorted(ps, GRID, side="left") / ps.size
    spec = np.searchsorted(ns, GRID, side="left") / ns.size
    gap = np.abs(sens - spec)
    i = int(np.argmin(gap))            # first minimum = lowest threshold
    uninformative = bool(np.ptp(prob) < 1e-12)
    if uninformative:
        i = 0
    return BalancedThreshold(float(GRID[i]), float(sens[i]), float(spec[i]), uninformative)


def balanced_threshold(fit: LogisticFit, data: RiskDataset) -> BalancedThreshold:
    """Grid threshold (step 0.001) minimising |sensitivity - specificity|."""
    res = balanced_threshold_from_probs(fit.predict_proba(data), data.outcome)
    if res.uninformative:
        warnings.warn("predicted probabilities are constant; threshold is arbitrary")
    return res


def high_risk_subset(fit: LogisticFit, data: RiskDataset, threshold: float) -> set[str]:
    """Subjects whose predicted probability is strictly above ``threshold``."""
    prob = fit.predict_proba(data)
    return {sid for sid, p in zip(data.subject_ids, prob) if p > threshold}


# ---------------------------------------------------------------------------
# datasets


THREE_YEARS = 3.0 * DAYS_PER_YEAR


def prediction_visit(times: np.ndarray, endpoint_days: float,
                     window: tuple[float, float] = (2.5, 3.5)) -> int | None:
    """Visit closest to three years before the endpoint within ``window`` years."""
    back = (endpoint_days - times) / DAYS_PER_YEAR
    ok = np.flatnonzero((back >= window[0]) & (back <= window[1]))
    if ok.size == 0:
        return None
    return int(ok[np.argmin(np.abs(back[ok] - 3.0))])


def _frame(std_cohort: Cohort, rows: list[tuple[int, int]], factor_values: list[np.ndarray],
           factor_names: Sequence[str]) -> RiskDataset:
    subs = std_cohort.subjects
    cols: dict[str, np.ndarray] = {}
    q = len(factor_names)
    fv = np.array(factor_values).reshape(-1, q)
    for j, name in enumerate(factor_names):
        cols[name] = fv[:, j]
    for t in std_cohort.test_catalog:
        cols[t.name] = np.array([subs[i].scores[v, t.index] for i, v in rows])
    for p, name in enumerate(std_cohort.schema.covariates):
        cols[name] = np.array([subs[i].covariates[p] for i, _ in rows])
    outcome = np.array([float(subs[i].converted) for i, _ in rows])
    return RiskDataset(cols, outcome, [subs[i].subject_id for i, _ in rows])


def training_dataset(std_cohort: Cohort, factor_scores: dict[str, np.ndarray],
                     factor_names: Sequence[str]) -> RiskDataset:
    """One row per subject with a visit 2.5-3.5 years before their endpoint.

    ``std_cohort`` supplies standardized single-test predictors and covariates;
    ``factor_scores`` maps subject id to its ``(J, Q)`` posterior-mean scores.
    """
    rows, fvals = [], []
    for i, s in enumerate(std_cohort.subjects):
        v = prediction_visit(s.visit_times, s.endpoint_days)
        if v is None:
            continue
        rows.append((i, v))
        fvals.append(factor_scores[s.subject_id][v])
    log.info("training dataset: %d of %d subjects have a prediction visit", len(rows), len(std_cohort))
    return _frame(std_cohort, rows, fvals, factor_names)


def baseline_factor_scores(adj_cohort: Cohort, params: StateSpaceParams, visit: int = 1) -> np.ndarray:
    """Filtered factor means at ``visit`` using only visits up to and including it."""
    out = np.empty((len(adj_cohort), params.n_factors))
    for i, s in enumerate(adj_cohort.subjects):
        out[i] = kalman_filter(s.truncated(visit + 1), params).means[visit]
    return out


def baseline_dataset(std_cohort: Cohort, adj_cohort: Cohort, params: StateSpaceParams,
                     factor_names: Sequence[str], visit: int = 1) -> RiskDataset:
    """Trial-baseline predictors for every subject (second visit by default)."""
    scores = baseline_factor_scores(adj_cohort, params, visit)
    rows = [(i, visit) for i in range(len(std_cohort))]
    return _frame(std_cohort, rows, list(scores), factor_names)


# ---------------------------------------------------------------------------
# model table


@dataclass
class ModelRow:
    model: str
    terms: list[str]
    fit: LogisticFit | None
    sensitivity: float = float("nan")
    specificity: float = float("nan")
    threshold: float = float("nan")
    flag: str = ""


def fit_model_row(name: str, data: RiskDataset, target_terms: Sequence[str],
                  covariates: Sequence[str]) -> ModelRow:
    """Fit target terms plus covariates; failures flag the row instead of raising."""
    try:
        fit = fit_logistic(data, list(target_terms) + list(covariates))
    except RiskModelError as exc:
        kind = "separation" if isinstance(exc, SeparationError) else "fit_failed"
        return ModelRow(name, list(target_terms), None, flag=f"{kind}: {exc}")
    bt = balanced_threshold_from_probs(fit.predict_proba(data), data.outcome)
    fit.threshold = bt.threshold
    flag = ";".join(fit.flags)
    return ModelRow(name, list(target_terms), fit, bt.sensitivity, bt.specificity, bt.threshold, flag)


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_model_table(rows: Sequence[ModelRow], path: str | Path) -> Path:
    """Odds ratio (95% CI), p, sensitivity, specificity per model row.

    Rows with several target terms list them joined by ``;`` in each column.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "terms", "odds_ratio", "ci_low", "ci_high", "p_value",
                    "sensitivity", "specificity", "threshold", "flag"])
        for r in rows:
            if r.fit is None or not r.terms:
                w.writerow([r.model, ";".join(r.terms), "", "", "", "", _fmt(r.sensitivity),
                            _fmt(r.specificity), _fmt(r.threshold), r.flag])
                continue
            ors = [r.fit.odds_ratio(t) for t in r.terms]
            w.writerow([r.model, ";".join(r.terms),
                        ";".join(repr(o[0]) for o in ors), ";".join(repr(o[1]) for o in ors),
                        ";".join(repr(o[2]) for o in ors),
                        ";".join(repr(r.fit.p_value(t)) for t in r.terms),
                        _fmt(r.sensitivity), _fmt(r.specificity), _fmt(r.threshold), r.flag])
    return path
