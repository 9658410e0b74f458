"""Generative simulator for cohorts that follow the factor model.

Subjects get latent factor random walks with gap-scaled innovations, noisy
test scores on a raw clinical scale, baseline covariates, and a three-year
conversion outcome drawn from a logistic model on the true factors at the
second visit (the trial baseline).  Conversion is observed at the first
scheduled visit after it happens; death and loss to follow-up truncate the
visit schedule.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data_model import (DAYS_PER_YEAR, CognitiveTestId, Cohort, CohortSchema, SubjectSeries,
                         default_schema, save_cohort)
from .gibbs import FACTOR_NAMES, battery_structure

# loosely follows the test-set marginals: 34.5% male, education 15.8 (2.86),
# age 70.7 (10.1), 84% White, 30% carrying at least one e4 allele
DEFAULT_COVARIATES: list[dict[str, Any]] = [
    {"name": "sex_male", "kind": "bernoulli", "p": 0.345},
    {"name": "education_years", "kind": "normal", "mean": 15.8, "sd": 2.86, "min": 2.0, "max": 28.0, "round": True},
    {"name": "age_baseline", "kind": "normal", "mean": 70.7, "sd": 10.1, "min": 40.0, "max": 99.0, "round": True},
    {"name": "race", "kind": "categorical", "columns": ["race_black", "race_asian", "race_other"],
     "probs": [0.136, 0.020, 0.010]},
    {"name": "apoe4", "kind": "binomial", "n": 2, "p": 0.17},
    {"name": "hypertension", "kind": "bernoulli", "p": 0.45},
    {"name": "diabetes", "kind": "bernoulli", "p": 0.12},
    {"name": "smoking_years", "kind": "exponential_mixture", "p_zero": 0.55, "mean": 15.0, "round": True},
    {"name": "obese", "kind": "bernoulli", "p": 0.28},
    {"name": "tbi", "kind": "bernoulli", "p": 0.108},
    {"name": "depression", "kind": "bernoulli", "p": 0.283},
]

# raw-scale centre and spread of each test, battery order
DEFAULT_SCORE_CENTER = [13.0, 11.5, 8.5, 6.5, 20.0, 14.0, 27.0, 33.0, 85.0, 46.0]
DEFAULT_SCORE_SCALE = [3.8, 4.2, 2.1, 2.2, 5.3, 4.1, 3.0, 12.0, 40.0, 11.0]

DEFAULT_G = [0.9, 0.85, 0.6, 0.7, 0.8, 0.7, 0.65, 0.75, 0.9, 0.85]
DEFAULT_SIGMA_ETA = [
    [1.0, 0.3, 0.4, 0.3],
    [0.3, 1.0, 0.3, 0.2],
    [0.4, 0.3, 1.0, 0.3],
    [0.3, 0.2, 0.3, 1.0],
]


def _default_G() -> list[list[float]]:
    mask = battery_structure().mask
    return (mask * np.array(DEFAULT_G)[:, None]).tolist()


@dataclass
class GenConfig:
    n_subjects: int = 2000
    visits_per_subject: tuple[int, int] = (5, 8)          # inclusive range of scheduled visits
    visit_gap_years: tuple[float, float] = (0.8, 1.3)
    true_G: list[list[float]] = field(default_factory=_default_G)
    true_sigma_eps: list[float] = field(default_factory=lambda: [0.3] * 10)
    true_sigma_eta: list[list[float]] = field(default_factory=lambda: [r[:] for r in DEFAULT_SIGMA_ETA])
    initial_state_sd: float = float(np.sqrt(10.0))    # matches the sampler's default P0 = 10 I
    test_names: list[str] | None = None                   # None -> default battery when K == 10
    sign_flip: list[bool] | None = None
    apply_sign_convention: bool = True
    score_center: list[float] | None = field(default_factory=lambda: list(DEFAULT_SCORE_CENTER))
    score_scale: list[float] | None = field(default_factory=lambda: list(DEFAULT_SCORE_SCALE))
    covariate_distributions: list[dict[str, Any]] = field(default_factory=lambda: [dict(d) for d in DEFAULT_COVARIATES])
    # covariate name -> effect on every standardized-scale test score, per unit
    score_covariate_effects: dict[str, float] = field(
        default_factory=lambda: {"age_baseline": -0.02, "education_years": 0.05})
    # logistic conversion model; factor coefficients per factor, covariate
    # coefficients act on (value - distribution mean)
    outcome_intercept: float = -3.9
    outcome_factor_coefs: list[float] = field(default_factory=lambda: [-0.25, 0.0, -0.2, 0.0])
    outcome_covariate_coefs: dict[str, float] = field(
        default_factory=lambda: {"age_baseline": 0.07, "apoe4": 0.8})
    conversion_window_years: tuple[float, float] = (1.0, 2.75)
    ltfu_prob: float = 0.04
    death_hazard_per_year: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        G = np.asarray(self.true_G, dtype=float)
        K, Q = G.shape
        if self.n_subjects < 0:
            raise ValueError("n_subjects must be non-negative")
        lo, hi = self.visits_per_subject
        if not 2 <= lo <= hi:
            raise ValueError("visits_per_subject must be a range with minimum >= 2")
        if not 0 < self.visit_gap_years[0] <= self.visit_gap_years[1]:
            raise ValueError("visit_gap_years must be a positive range")
        if len(self.true_sigma_eps) != K or np.any(np.asarray(self.true_sigma_eps) < 0):
            raise ValueError("true_sigma_eps must be K non-negative variances")
        S = np.asarray(self.true_sigma_eta, dtype=float)
        if S.shape != (Q, Q) or not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0:
            raise ValueError("true_sigma_eta must be a Q x Q symmetric positive definite matrix")
        if Q > K:
            raise ValueError("need Q <= K")
        if len(self.outcome_factor_coefs) != Q:
            raise ValueError("outcome_factor_coefs needs one entry per factor")
        coefs = [self.outcome_intercept, *self.outcome_factor_coefs, *self.outcome_covariate_coefs.values()]
        if not np.all(np.isfinite(coefs)):
            raise ValueError("outcome coefficients must be finite")
        for name in (self.score_center, self.score_scale):
            if name is not None and len(name) != K:
                raise ValueError("score_center/score_scale need K entries")

    def schema(self) -> CohortSchema:
        K = len(self.true_G)
        if self.test_names is None and K == 10:
            base = default_schema().tests
            names = [t.name for t in base]
            flips = [t.sign_flip for t in base]
        else:
            names = self.test_names or [f"test_{k + 1}" for k in range(K)]
            flips = [False] * K
        if self.sign_flip is not None:
            flips = list(self.sign_flip)
        tests = tuple(CognitiveTestId(k, n, bool(f)) for k, (n, f) in enumerate(zip(names, flips)))
        return CohortSchema(tests, tuple(covariate_columns(self.covariate_distributions)))

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["visits_per_subject"] = list(self.visits_per_subject)
        d["visit_gap_years"] = list(self.visit_gap_years)
        d["conversion_window_years"] = list(self.conversion_window_years)
        return d

    @classmethod
    def from_mapping(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError("unknown generate settings: " + ", ".join(sorted(unknown)))
        d = dict(d)
        for key in ("visits_per_subject", "visit_gap_years", "conversion_window_years"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def covariate_columns(specs: list[dict]) -> list[str]:
    cols = []
    for spec in specs:
        cols.extend(spec["columns"] if spec["kind"] == "categorical" else [spec["name"]])
    return cols


def _draw_covariates(specs: list[dict], rng: np.random.Generator) -> list[float]:
    out: list[float] = []
    for spec in specs:
        kind = spec["kind"]
        if kind == "bernoulli":
            out.append(float(rng.random() < spec["p"]))
        elif kind == "binomial":
            out.append(float(rng.binomial(spec["n"], spec["p"])))
        elif kind == "normal":
            v = rng.normal(spec["mean"], spec["sd"])
            v = min(max(v, spec.get("min", -np.inf)), spec.get("max", np.inf))
            out.append(float(round(v)) if spec.get("round") else float(v))
        elif kind == "exponential_mixture":
            v = 0.0 if rng.random() < spec["p_zero"] else rng.exponential(spec["mean"])
            out.append(float(round(v)) if spec.get("round") else float(v))
        elif kind == "categorical":
            u = rng.random()
            dummies = [0.0] * len(spec["columns"])
            edge = 0.0
            for c, p in enumerate(spec["probs"]):
                edge += p
                if u < edge:
                    dummies[c] = 1.0
                    break
            out.extend(dummies)
        else:
            raise ValueError(f"unknown covariate distribution kind {kind!r}")
    return out


def covariate_means(specs: list[dict]) -> dict[str, float]:
    """Distribution means used to centre outcome-model covariates."""
    means: dict[str, float] = {}
    for spec in specs:
        kind = spec["kind"]
        if kind == "bernoulli":
            means[spec["name"]] = spec["p"]
        elif kind == "binomial":
            means[spec["name"]] = spec["n"] * spec["p"]
        elif kind == "normal":
            means[spec["name"]] = spec["mean"]
        elif kind == "exponential_mixture":
            means[spec["name"]] = (1 - spec["p_zero"]) * spec["mean"]
        elif kind == "categorical":
            means.update(dict(zip(spec["columns"], spec["probs"])))
    return means


@dataclass
class SyntheticCohort:
    cohort: Cohort
    alphas: list[np.ndarray]              # true factor paths over the kept visits
    baseline_alphas: np.ndarray           # (N, Q) true factors at the second visit
    converted_3y: np.ndarray              # (N,) outcome drawn from the logistic model
    risk: np.ndarray                      # (N,) true conversion probability


def simulate(config: GenConfig) -> SyntheticCohort:
    """Generate a cohort together with its latent truth."""
    config.validate()
    schema = config.schema()
    G = np.asarray(config.true_G, dtype=float)
    K, Q = G.shape
    sd_eps = np.sqrt(np.asarray(config.true_sigma_eps, dtype=float))
    L_eta = np.linalg.cholesky(np.asarray(config.true_sigma_eta, dtype=float))
    cov_names = list(schema.covariates)
    score_fx = np.zeros(len(cov_names))
    for name, eff in config.score_covariate_effects.items():
        score_fx[cov_names.index(name)] = eff
    out_fx = np.zeros(len(cov_names))
    for name, eff in config.outcome_covariate_coefs.items():
        out_fx[cov_names.index(name)] = eff
    centers = covariate_means(config.covariate_distributions)
    cov_center = np.array([centers.get(n, 0.0) for n in cov_names])
    factor_coefs = np.asarray(config.outcome_factor_coefs, dtype=float)
    sign = np.ones(K)
    if config.apply_sign_convention:
        sign[[t.index for t in schema.tests if t.sign_flip]] = -1.0
    center = np.zeros(K) if config.score_center is None else np.asarray(config.score_center, dtype=float)
    scale = np.ones(K) if config.score_scale is None else np.asarray(config.score_scale, dtype=float)

    subjects, paths, base_alpha, conv3, risks = [], [], [], [], []
    lo_j, hi_j = config.visits_per_subject
    for i in range(config.n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        cov = np.array(_draw_covariates(config.covariate_distributions, rng))
        n_sched = int(rng.integers(lo_j, hi_j + 1))
        gaps = rng.uniform(*config.visit_gap_years, size=n_sched - 1)
        t_years = np.concatenate([[0.0], np.cumsum(gaps)])
        alpha = np.empty((n_sched, Q))
        alpha[0] = config.initial_state_sd * rng.standard_normal(Q)
        for j in range(1, n_sched):
            alpha[j] = alpha[j - 1] + np.sqrt(gaps[j - 1]) * (L_eta @ rng.standard_normal(Q))
        noise = sd_eps * rng.standard_normal((n_sched, K))
        y = alpha @ G.T + noise + cov @ score_fx
        raw = center + scale * sign * y

        logit = config.outcome_intercept + factor_coefs @ alpha[1] + out_fx @ (cov - cov_center)
        p = 1.0 / (1.0 + np.exp(-logit))
        converts = bool(rng.random() < p)
        tau = rng.uniform(*config.conversion_window_years)
        death_after = rng.exponential(1.0 / config.death_hazard_per_year) if config.death_hazard_per_year > 0 \
            else np.inf
        lost = bool(rng.random() < config.ltfu_prob)

        base = t_years[1]
        death_t = base + death_after
        converted = False
        death_days = None
        if lost:
            keep = 2
            endpoint = t_years[1]
        else:
            keep = n_sched
            if converts:
                conv_t = base + tau
                after = np.flatnonzero(t_years >= conv_t)
                if after.size and death_t >= t_years[after[0]]:
                    keep = int(after[0])
                    converted = True
            if not converted:
                # non-converters are followed to their last visit or to death
                alive = np.flatnonzero(t_years < death_t)
                keep = min(keep, int(alive[-1]) + 1)
            endpoint = t_years[keep] if converted else t_years[keep - 1]
            if not converted and death_t < t_years[-1]:
                death_days = death_t * DAYS_PER_YEAR
            elif converted and death_t < endpoint:
                death_days = death_t * DAYS_PER_YEAR

        days = np.round(t_years * DAYS_PER_YEAR, 6)
        subjects.append(SubjectSeries(f"S{i:05d}", days[:keep], raw[:keep], cov, converted,
                                      float(np.round(endpoint * DAYS_PER_YEAR, 6)),
                                      None if death_days is None else float(np.round(death_days, 6))))
        paths.append(alpha[:keep])
        base_alpha.append(alpha[1])
        conv3.append(converts)
        risks.append(p)

    cohort = Cohort(subjects, schema)
    return SyntheticCohort(cohort, paths, np.array(base_alpha).reshape(-1, Q),
                           np.array(conv3, dtype=bool), np.array(risks))


def generate_cohort(config: GenConfig) -> Cohort:
    """Simulated cohort on the raw score scale; deterministic given ``config.seed``."""
    return simulate(config).cohort


def write_cohort(cohort: Cohort, path: str | Path) -> Path:
    return save_cohort(cohort, path)


def recovery_config(n_subjects: int = 300, seed: int = 0) -> GenConfig:
    """Scores directly on the model scale: no raw rescaling, sign flips or covariate effects."""
    return GenConfig(n_subjects=n_subjects, score_center=None, score_scale=None,
                     apply_sign_convention=False, score_covariate_effects={},
                     ltfu_prob=0.0, death_hazard_per_year=0.0, seed=seed)


__all__ = ["GenConfig", "SyntheticCohort", "simulate", "generate_cohort", "write_cohort",
           "recovery_config", "FACTOR_NAMES"]
