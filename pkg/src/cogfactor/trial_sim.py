"""Randomized-trial power simulation on a held-out cohort.

Pre-treatment time-to-conversion outcomes are derived from each subject's
visit history relative to the trial baseline (second visit).  Each replicate
enrolls participants with replacement under one selection method, randomizes
them 1:1, removes a fraction of treated conversions, fits a Breslow Cox model
adjusted for APOE4, education and sex, and converts the observed hazard ratio
and event count into post-hoc power and a required sample size.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from . import _kernels
from .data_model import DAYS_PER_YEAR, Cohort

log = logging.getLogger(__name__)

TRIAL_WINDOW_DAYS = 3.5 * DAYS_PER_YEAR
THREE_YEARS_DAYS = 3.0 * DAYS_PER_YEAR
METHODS = ("random", "factor_model", "covariate_model")
DEFAULT_EFFECTS = tuple(round(0.05 * i, 2) for i in range(1, 11))
ADJUSTERS = ("apoe4", "education_years", "sex_male")
MONOTONE_LIMIT = 20.0


class TrialError(RuntimeError):
    pass


class Disposition(enum.IntEnum):
    CENSORED = 0
    CONVERTED = 1
    DEATH_CENSORED = 2
    LOST_TO_FOLLOW_UP = 3


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    time: float                     # days from trial baseline
    event: Disposition
    adjusters: tuple[float, ...]    # APOE4, education, sex
    arm: str | None = None          # "treatment" / "control" once randomized

    @property
    def analyzable(self) -> bool:
        return self.event != Disposition.LOST_TO_FOLLOW_UP


@dataclass
class RecordArrays:
    """Column view of survival records used inside the replicate loop."""

    subject_ids: list[str]
    time: np.ndarray
    status: np.ndarray              # Disposition codes
    adjusters: np.ndarray           # (n, 3)

    @classmethod
    def from_records(cls, records: Sequence[SurvivalRecord]) -> "RecordArrays":
        return cls([r.subject_id for r in records],
                   np.array([r.time for r in records], dtype=float),
                   np.array([int(r.event) for r in records], dtype=np.int64),
                   np.array([r.adjusters for r in records], dtype=float).reshape(-1, len(ADJUSTERS)))

    def __len__(self) -> int:
        return self.time.shape[0]


def derive_true_outcomes(cohort: Cohort, adjusters: Sequence[str] = ADJUSTERS) -> list[SurvivalRecord]:
    """Pre-treatment outcomes measured from each subject's second visit.

    Conversions within 3.5 years are events at the conversion visit.  Others
    are censored at death if it falls inside the window, else at the visit
    closest to three years; subjects with neither are lost to follow-up.
    """
    cols = [cohort.schema.covariate_index(a) for a in adjusters]
    out = []
    counts = {d: 0 for d in Disposition}
    for s in cohort.subjects:
        if s.n_visits < 2:
            raise TrialError(f"subject {s.subject_id} has fewer than two visits")
        base = s.visit_times[1]
        adj = tuple(float(s.covariates[c]) for c in cols)
        conv_t = s.endpoint_days - base if s.converted else math.inf
        death_t = s.death_days - base if s.death_days is not None else math.inf
        if 0 < conv_t <= TRIAL_WINDOW_DAYS and conv_t <= death_t:
            rec = SurvivalRecord(s.subject_id, conv_t, Disposition.CONVERTED, adj)
        elif 0 < death_t <= TRIAL_WINDOW_DAYS:
            rec = SurvivalRecord(s.subject_id, death_t, Disposition.DEATH_CENSORED, adj)
        else:
            cand = list(s.visit_times[2:] - base)
            if not s.converted:
                cand.append(s.endpoint_days - base)
            cand = np.array(sorted(set(c for c in cand if 0 < c <= TRIAL_WINDOW_DAYS)))
            if cand.size:
                t = float(cand[np.argmin(np.abs(cand - THREE_YEARS_DAYS))])
                rec = SurvivalRecord(s.subject_id, t, Disposition.CENSORED, adj)
            else:
                rec = SurvivalRecord(s.subject_id, 0.0, Disposition.LOST_TO_FOLLOW_UP, adj)
        counts[rec.event] += 1
        out.append(rec)
    log.info("derived outcomes: %s", {d.name.lower(): n for d, n in counts.items()})
    return out


def select_participants(method: str, pools: Mapping[str, np.ndarray], n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` enrollees drawn with replacement from the method's pool."""
    pool = pools[method]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if len(pool) == 0:
        raise TrialError(f"selection pool for {method!r} is empty")
    return np.asarray(pool)[rng.integers(0, len(pool), size=n)]


@dataclass
class TrialOutcomes:
    time: np.ndarray
    event: np.ndarray               # 1 = conversion
    treated: np.ndarray             # 1 = treatment arm
    analyzable: np.ndarray          # False for lost to follow-up


def apply_treatment(records: RecordArrays, effect: float, rng: np.random.Generator) -> TrialOutcomes:
    """Randomize 1:1 and censor each treated conversion at 3 years with probability ``effect``."""
    if not 0.0 <= effect < 1.0:
        raise TrialError("effect must lie in [0, 1)")
    n = len(records)
    treated = (rng.random(n) < 0.5).astype(np.int8)
    u = rng.random(n)
    time = records.time.copy()
    event = (records.status == Disposition.CONVERTED).astype(np.int8)
    prevented = (treated == 1) & (event == 1) & (u >= 1.0 - effect)
    time[prevented] = THREE_YEARS_DAYS
    event[prevented] = 0
    return TrialOutcomes(time, event, treated, records.status != Disposition.LOST_TO_FOLLOW_UP)


def apply_treatment_records(records: Sequence[SurvivalRecord], effect: float,
                            rng: np.random.Generator) -> list[SurvivalRecord]:
    """Record-level wrapper around :func:`apply_treatment`."""
    arrs = RecordArrays.from_records(records)
    out = apply_treatment(arrs, effect, rng)
    res = []
    for i, r in enumerate(records):
        arm = "treatment" if out.treated[i] else "control"
        if out.treated[i] and r.event == Disposition.CONVERTED and not out.event[i]:
            res.append(SurvivalRecord(r.subject_id, THREE_YEARS_DAYS, Disposition.CENSORED, r.adjusters, arm))
        else:
            res.append(SurvivalRecord(r.subject_id, r.time, r.event, r.adjusters, arm))
    return res


# ---------------------------------------------------------------------------
# Cox model


@dataclass
class CoxFit:
    names: list[str]
    coefficients: np.ndarray
    std_errors: np.ndarray
    log_likelihood: float
    grad_norm: float
    n_iter: int
    converged: bool
    monotone: bool
    n_events: int
    n_obs: int

    @property
    def flagged(self) -> bool:
        return self.monotone or not self.converged

    @property
    def hr(self) -> float:
        return float(math.exp(self.coefficients[0]))

    @property
    def se(self) -> float:
        return float(self.std_errors[0])

    @property
    def p_value(self) -> float:
        if not np.isfinite(self.se) or self.se <= 0:
            return float("nan")
        return float(2.0 * norm.sf(abs(self.coefficients[0]) / self.se))


def cox_partial_loglik(time, event, X, beta) -> float:
    order = np.argsort(time, kind="stable")
    return _kernels.cox_breslow(time[order], event[order], X[order], beta)[0]


def fit_cox(time: np.ndarray, event: np.ndarray, X: np.ndarray, names: Sequence[str] | None = None,
            tol: float = 1e-8, max_iter: int = 50) -> CoxFit:
    """Breslow Cox regression by Newton's method; column 0 is the main effect.

    Columns after the first that are constant are dropped.  A fit whose main
    effect has no events in one of its levels, or whose coefficients run past
    ``MONOTONE_LIMIT``, is marked monotone.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=np.int8)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != time.shape[0]:
        X = X.T
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    n_events = int(event.sum())
    if n_events == 0:
        raise TrialError("no events; Cox model is undefined")
    main = X[:, 0]
    if main.min() == main.max():
        raise TrialError("main effect does not vary")
    keep = [0] + [j for j in range(1, X.shape[1]) if X[:, j].min() != X[:, j].max()]
    X = X[:, keep]
    names = [names[j] for j in keep]
    order = np.argsort(time, kind="stable")
    t, ev = time[order], event[order]
    Xs = X[order] - X.mean(axis=0)

    # no events at one level of a binary main effect -> likelihood is monotone in beta_0
    levels = np.unique(main)
    monotone = levels.size == 2 and any(event[main == lv].sum() == 0 for lv in levels)

    beta = np.zeros(X.shape[1])
    ll, grad, hess = _kernels.cox_breslow(t, ev, Xs, beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            break
        s = 1.0
        while True:
            cand = beta + s * step
            ll_c, g_c, h_c = _kernels.cox_breslow(t, ev, Xs, cand)
            # a decrease at the level of roundoff is not a real decrease
            if ll_c >= ll - 1e-12 * abs(ll) or s < 1e-10:
                break
            s *= 0.5
        beta, ll, grad, hess = cand, ll_c, g_c, h_c
        if np.any(np.abs(beta) > MONOTONE_LIMIT):
            monotone = True
            break
    else:
        converged = bool(np.linalg.norm(grad) < tol)
    if not converged and np.linalg.norm(grad) < tol:
        converged = True
    try:
        cov = np.linalg.inv(-hess)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(beta.shape, np.nan)
    return CoxFit(names, beta, se, float(ll), float(np.linalg.norm(grad)), it, converged,
                  bool(monotone), n_events, int(time.shape[0]))


def fit_cox_records(records: Sequence[SurvivalRecord]) -> CoxFit:
    """Treatment effect adjusted for the record adjusters, analyzable records only."""
    rows = [r for r in records if r.analyzable]
    time = np.array([r.time for r in rows])
    event = np.array([int(r.event == Disposition.CONVERTED) for r in rows])
    X = np.array([[1.0 if r.arm == "treatment" else 0.0, *r.adjusters] for r in rows])
    return fit_cox(time, event, X, ["treatment", *ADJUSTERS])


# ---------------------------------------------------------------------------
# power and sample size


def required_events(hr: float, alpha: float = 0.05, power: float = 0.8, allocation: float = 0.5) -> float:
    """Events needed to detect ``hr`` with a two-sided level-alpha test."""
    if hr <= 0:
        raise ValueError("hazard ratio must be positive")
    if hr == 1.0:
        return math.inf
    z = norm.ppf(1.0 - alpha / 2.0) + norm.ppf(power)
    d = z * z / (allocation * (1.0 - allocation) * math.log(hr) ** 2)
    return float(math.ceil(d - 1e-9))


def posthoc_power(hr: float, n_events: float, alpha: float = 0.05, allocation: float = 0.5) -> float:
    """Normal-approximation power at the observed hazard ratio and event count."""
    if hr <= 0:
        raise ValueError("hazard ratio must be positive")
    za = norm.ppf(1.0 - alpha / 2.0)
    return float(norm.cdf(math.sqrt(n_events * allocation * (1.0 - allocation)) * abs(math.log(hr)) - za))


@dataclass
class TrialConfig:
    n_enrolled: int = 1000
    methods: tuple[str, ...] = METHODS
    effects: tuple[float, ...] = DEFAULT_EFFECTS
    n_replicates: int = 10_000
    alpha: float = 0.05
    target_power: float = 0.8
    allocation: float = 0.5
    seed: int = 0

    @classmethod
    def desk(cls, **kw) -> "TrialConfig":
        kw.setdefault("n_replicates", 2_000)
        return cls(**kw)

    def validate(self) -> None:
        if self.n_enrolled < 2:
            raise ValueError("n_enrolled must be at least 2")
        if any(not 0.0 <= e < 1.0 for e in self.effects):
            raise ValueError("effects must lie in [0, 1)")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError("unknown selection methods: " + ", ".join(sorted(unknown)))


@dataclass
class TrialReplicate:
    hr_hat: float
    log_hr_se: float
    p_value: float
    n_events: int
    n_analyzable: int
    event_probability: float
    power: float
    required_n: float
    forced_zero: bool


def replicate_summary(cox: CoxFit | None, n_events: int, n_analyzable: int,
                      config: TrialConfig) -> TrialReplicate:
    """Post-hoc power and required N, with the power-0 / infinite-N rule.

    ``cox`` may be ``None`` only for hand-built summaries in tests; a fit that
    is flagged (monotone or unconverged) or whose hazard ratio exceeds 1 gets
    power 0 and an infinite required sample size.
    """
    if n_analyzable <= 0:
        raise TrialError("no analyzable participants")
    p_event = n_events / n_analyzable
    hr = cox.hr if cox is not None else float("nan")
    se = cox.se if cox is not None else float("nan")
    pval = cox.p_value if cox is not None else float("nan")
    forced = cox is None or cox.flagged or hr > 1.0
    if forced:
        power, req = 0.0, math.inf
    else:
        power = posthoc_power(hr, n_events, config.alpha, config.allocation)
        d = required_events(hr, config.alpha, config.target_power, config.allocation)
        req = d / p_event if p_event > 0 else math.inf
    return TrialReplicate(hr, se, pval, n_events, n_analyzable, p_event, power, req, forced)


def summary_from_hr(hr: float, n_events: int, n_analyzable: int, config: TrialConfig) -> TrialReplicate:
    """Replicate summary from a bare hazard ratio (no fitted model)."""
    fit = CoxFit(["treatment"], np.array([math.log(hr)]), np.array([np.nan]), float("nan"), 0.0, 0,
                 True, False, n_events, n_analyzable)
    return replicate_summary(fit, n_events, n_analyzable, config)


# ---------------------------------------------------------------------------
# grid


def replicate_rng(seed: int, method_idx: int, effect_idx: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, method_idx, effect_idx, rep]))


def run_replicate(records: RecordArrays, pools: Mapping[str, np.ndarray], method: str, effect: float,
                  config: TrialConfig, rng: np.random.Generator) -> TrialReplicate:
    idx = select_participants(method, pools, config.n_enrolled, rng)
    # ids are not needed inside the replicate loop
    sub = RecordArrays([], records.time[idx], records.status[idx], records.adjusters[idx])
    out = apply_treatment(sub, effect, rng)
    a = out.analyzable
    n_an = int(a.sum())
    if n_an == 0:
        raise TrialError("no analyzable participants")
    X = np.column_stack([out.treated[a], sub.adjusters[a]])
    cox = fit_cox(out.time[a], out.event[a], X, ["treatment", *ADJUSTERS])
    return replicate_summary(cox, cox.n_events, n_an, config)


@dataclass
class CellResult:
    method: str
    effect: float
    replicates: list[TrialReplicate]
    n_failed: int
    failures: list[str] = field(default_factory=list)

    def _arr(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.replicates], dtype=float)

    @property
    def hr(self) -> np.ndarray:
        return self._arr("hr_hat")

    @property
    def power(self) -> np.ndarray:
        return self._arr("power")

    @property
    def required_n(self) -> np.ndarray:
        return self._arr("required_n")

    @property
    def p_values(self) -> np.ndarray:
        return self._arr("p_value")

    @property
    def n_events(self) -> np.ndarray:
        return self._arr("n_events")

    @property
    def median_power(self) -> float:
        return float(np.median(self.power)) if self.replicates else float("nan")

    @property
    def median_power_unforced(self) -> float:
        keep = ~np.array([r.forced_zero for r in self.replicates], dtype=bool)
        return float(np.median(self.power[keep])) if keep.any() else float("nan")

    @property
    def median_required_n(self) -> float:
        return float(np.median(self.required_n)) if self.replicates else float("nan")

    @property
    def median_hr(self) -> float:
        hr = self.hr
        hr = hr[np.isfinite(hr)]
        return float(np.median(hr)) if hr.size else float("nan")

    def rejection_rate(self, alpha: float = 0.05) -> float:
        p = self.p_values
        p = p[np.isfinite(p)]
        return float(np.mean(p < alpha)) if p.size else float("nan")


@dataclass
class TrialGridResult:
    config: TrialConfig
    cells: list[CellResult]

    def cell(self, method: str, effect: float) -> CellResult:
        for c in self.cells:
            if c.method == method and math.isclose(c.effect, effect):
                return c
        raise KeyError((method, effect))

    def write_grid_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "effect", "median_power", "median_required_n", "n_failed_replicates",
                        "median_power_excluding_forced_zero", "median_hr", "mean_events", "n_replicates"])
            for c in self.cells:
                w.writerow([c.method, repr(c.effect), repr(c.median_power), repr(c.median_required_n),
                            c.n_failed, repr(c.median_power_unforced), repr(c.median_hr),
                            repr(float(c.n_events.mean())) if c.replicates else "nan", len(c.replicates)])
        return path

    def write_hr_distributions(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for c in self.cells:
            p = directory / f"hr_{c.method}_{c.effect:.2f}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["replicate", "hr_hat", "p_value", "n_events", "power", "required_n"])
                for i, r in enumerate(c.replicates):
                    w.writerow([i, repr(r.hr_hat), repr(r.p_value), r.n_events, repr(r.power),
                                repr(float(r.required_n))])
            paths.append(p)
        return paths

    def write_figure_data(self, directory: str | Path, hist_effect: float = 0.2,
                          bins: np.ndarray | None = None) -> list[Path]:
        """Power and required-N curves per method, and HR histogram counts."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        methods = list(self.config.methods)
        effects = list(self.config.effects)
        out = []
        for fname, attr in (("power_by_effect.csv", "median_power"),
                            ("required_n_by_effect.csv", "median_required_n")):
            p = directory / fname
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["effect"] + methods)
                for e in effects:
                    w.writerow([repr(e)] + [repr(getattr(self.cell(m, e), attr)) for m in methods])
            out.append(p)
        if any(math.isclose(hist_effect, e) for e in effects):
            edges = np.geomspace(0.25, 4.0, 41) if bins is None else bins
            p = directory / f"hr_histogram_effect_{hist_effect:.2f}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_low", "bin_high"] + methods)
                counts = [np.histogram(self.cell(m, hist_effect).hr, bins=edges)[0] for m in methods]
                for b in range(len(edges) - 1):
                    w.writerow([repr(float(edges[b])), repr(float(edges[b + 1]))] + [int(c[b]) for c in counts])
            out.append(p)
        return out


def run_trial_grid(config: TrialConfig, records: Sequence[SurvivalRecord] | RecordArrays,
                   pools: Mapping[str, Sequence[int]]) -> TrialGridResult:
    """Replicates for every (method, effect) pair; failed replicates are counted, not fatal.

    ``pools`` maps each selection method to indices into ``records``.
    """
    config.validate()
    arrs = records if isinstance(records, RecordArrays) else RecordArrays.from_records(records)
    pools = {m: np.asarray(v, dtype=np.int64) for m, v in pools.items()}
    cells = []
    for mi, method in enumerate(config.methods):
        for ei, effect in enumerate(config.effects):
            reps, failures = [], []
            for r in range(config.n_replicates):
                rng = replicate_rng(config.seed, mi, ei, r)
                try:
                    reps.append(run_replicate(arrs, pools, method, effect, config, rng))
                except TrialError as exc:
                    failures.append(f"replicate {r}: {exc}")
            if failures:
                log.warning("%s effect %.2f: %d failed replicates", method, effect, len(failures))
            cells.append(CellResult(method, effect, reps, len(failures), failures[:20]))
    return TrialGridResult(config, cells)


def selection_pools(records: Sequence[SurvivalRecord], high_risk: Mapping[str, set[str]]) -> dict[str, np.ndarray]:
    """Indices for random selection (everyone) and each model's high-risk subset."""
    ids = [r.subject_id for r in records]
    pools = {"random": np.arange(len(ids))}
    for method, subset in high_risk.items():
        pools[method] = np.array([i for i, s in enumerate(ids) if s in subset], dtype=np.int64)
    return pools
