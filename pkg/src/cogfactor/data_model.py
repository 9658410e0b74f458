"""Cohort representation, CSV ingestion and the score preprocessing chain.

The factor model consumes covariate-adjusted, standardized test scores.  This
module owns everything up to that point: reading the one-row-per-visit cohort
CSV with complete-case filtering, the sign convention for tests where a higher
raw score is worse, pooled standardization, and pooled OLS residualization on
baseline covariates.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25


class CohortError(ValueError):
    """Base class for cohort construction failures."""


class CohortParseError(CohortError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DegenerateColumnError(CohortError):
    pass


class RankDeficientError(CohortError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__("design matrix is rank deficient; collinear columns: " + ", ".join(self.columns))


@dataclass(frozen=True)
class CognitiveTestId:
    index: int
    name: str
    sign_flip: bool = False


@dataclass(frozen=True)
class CohortSchema:
    """Ordered test catalog and covariate names for a cohort file."""

    tests: tuple[CognitiveTestId, ...]
    covariates: tuple[str, ...]

    @property
    def test_names(self) -> list[str]:
        return [t.name for t in self.tests]

    @property
    def n_tests(self) -> int:
        return len(self.tests)

    @property
    def n_covariates(self) -> int:
        return len(self.covariates)

    def covariate_index(self, name: str) -> int:
        return self.covariates.index(name)

    def columns(self) -> list[str]:
        return (["subject_id", "visit_days"] + self.test_names + list(self.covariates)
                + ["endpoint_days", "converted", "death_days"])

    def to_dict(self) -> dict:
        return {
            "tests": [{"name": t.name, "sign_flip": t.sign_flip} for t in self.tests],
            "covariates": list(self.covariates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSchema":
        tests = tuple(CognitiveTestId(i, t["name"], bool(t.get("sign_flip", False)))
                      for i, t in enumerate(d["tests"]))
        return cls(tests, tuple(d["covariates"]))


# Test order matters: the structured loading map indexes into it.
BATTERY_TESTS: tuple[tuple[str, bool], ...] = (
    ("immediate_recall", False),
    ("delayed_recall", False),
    ("digit_span_forward", True),
    ("digit_span_backward", True),
    ("animal_list", False),
    ("vegetable_list", False),
    ("boston_naming", False),
    ("trail_making_a", False),
    ("trail_making_b", False),
    ("digit_symbol", False),
)

# Binary covariates are 0/1, race is dummy coded against White, APOE4 is the
# allele count 0/1/2.
BASELINE_COVARIATES: tuple[str, ...] = (
    "sex_male",
    "education_years",
    "age_baseline",
    "race_black",
    "race_asian",
    "race_other",
    "apoe4",
    "hypertension",
    "diabetes",
    "smoking_years",
    "obese",
    "tbi",
    "depression",
)


def default_schema() -> CohortSchema:
    tests = tuple(CognitiveTestId(i, name, flip) for i, (name, flip) in enumerate(BATTERY_TESTS))
    return CohortSchema(tests, BASELINE_COVARIATES)


@dataclass(eq=False)
class SubjectSeries:
    """One subject's cognitively normal visits plus their endpoint information.

    ``visit_times`` are days since the subject's first visit, ``scores`` is a
    ``(J, K)`` array and ``covariates`` the baseline covariate vector.
    ``endpoint_days`` is the first MCI/dementia visit for converters and the
    last recorded visit otherwise.
    """

    subject_id: str
    visit_times: np.ndarray
    scores: np.ndarray
    covariates: np.ndarray
    converted: bool = False
    endpoint_days: float = 0.0
    death_days: float | None = None

    def __post_init__(self):
        self.visit_times = np.asarray(self.visit_times, dtype=float)
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.visit_times.ndim != 1:
            raise CohortError("visit_times must be one-dimensional")
        if self.scores.shape[0] != self.visit_times.shape[0]:
            raise CohortError(
                f"subject {self.subject_id}: {self.scores.shape[0]} score rows for "
                f"{self.visit_times.shape[0]} visits")
        if np.any(np.diff(self.visit_times) <= 0):
            raise CohortError(f"subject {self.subject_id}: visit times must be strictly increasing")
        self.converted = bool(self.converted)
        self.endpoint_days = float(self.endpoint_days)
        if self.death_days is not None:
            self.death_days = float(self.death_days)

    @property
    def n_visits(self) -> int:
        return self.visit_times.shape[0]

    def gaps_years(self) -> np.ndarray:
        """Inter-visit gaps in years, length ``J - 1``."""
        return np.diff(self.visit_times) / DAYS_PER_YEAR

    def with_scores(self, scores: np.ndarray) -> "SubjectSeries":
        return replace(self, scores=np.asarray(scores, dtype=float))

    def truncated(self, n_visits: int) -> "SubjectSeries":
        return replace(self, visit_times=self.visit_times[:n_visits], scores=self.scores[:n_visits])

    def __eq__(self, other):
        if not isinstance(other, SubjectSeries):
            return NotImplemented
        return (self.subject_id == other.subject_id
                and np.array_equal(self.visit_times, other.visit_times)
                and np.array_equal(self.scores, other.scores)
                and np.array_equal(self.covariates, other.covariates)
                and self.converted == other.converted
                and self.endpoint_days == other.endpoint_days
                and self.death_days == other.death_days)


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_dropped_missing: int = 0
    subjects_read: int = 0
    subjects_dropped_single_visit: int = 0


@dataclass(eq=False)
class Cohort:
    subjects: list[SubjectSeries]
    schema: CohortSchema = field(default_factory=default_schema)
    # per test name -> (mean, sd) applied after the sign flip; None while raw
    standardization: dict[str, tuple[float, float]] | None = None
    # (1 + P, K) covariate effects removed from the scores; None if not adjusted
    adjustment: np.ndarray | None = None
    load_report: LoadReport | None = None

    def __post_init__(self):
        p = self.schema.n_covariates
        k = self.schema.n_tests
        for s in self.subjects:
            if s.covariates.shape != (p,):
                raise CohortError(f"subject {s.subject_id}: expected {p} covariates, got {s.covariates.shape}")
            if s.scores.shape[1] != k:
                raise CohortError(f"subject {s.subject_id}: expected {k} test columns, got {s.scores.shape[1]}")

    @property
    def test_catalog(self) -> tuple[CognitiveTestId, ...]:
        return self.schema.tests

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def n_visits(self) -> int:
        return sum(s.n_visits for s in self.subjects)

    def stacked_scores(self) -> np.ndarray:
        if not self.subjects:
            return np.empty((0, self.schema.n_tests))
        return np.vstack([s.scores for s in self.subjects])

    def stacked_covariates(self) -> np.ndarray:
        """Baseline covariates repeated once per visit, ``(n_visits, P)``."""
        if not self.subjects:
            return np.empty((0, self.schema.n_covariates))
        return np.vstack([np.tile(s.covariates, (s.n_visits, 1)) for s in self.subjects])

    def with_stacked_scores(self, y: np.ndarray, **changes) -> "Cohort":
        out, start = [], 0
        for s in self.subjects:
            out.append(s.with_scores(y[start:start + s.n_visits]))
            start += s.n_visits
        return replace(self, subjects=out, **changes)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        keep = set(ids)
        return replace(self, subjects=[s for s in self.subjects if s.subject_id in keep])

    def by_id(self) -> dict[str, SubjectSeries]:
        return {s.subject_id: s for s in self.subjects}

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        if self.adjustment is None or other.adjustment is None:
            same_adj = self.adjustment is None and other.adjustment is None
        else:
            same_adj = np.array_equal(self.adjustment, other.adjustment)
        return (self.schema == other.schema and self.subjects == other.subjects
                and self.standardization == other.standardization and same_adj)


# ---------------------------------------------------------------------------
# CSV I/O


def _fmt(x: float) -> str:
    # repr round-trips exactly; integral values stay compact
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x)) if x != 0 or math.copysign(1, x) > 0 else "-0.0"
    return repr(float(x))


def save_cohort(cohort: Cohort, path: str | Path) -> Path:
    """Write ``cohort`` in the one-row-per-visit CSV layout."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cohort.schema.columns())
        for s in cohort.subjects:
            tail = [_fmt(s.endpoint_days), "1" if s.converted else "0",
                    "" if s.death_days is None else _fmt(s.death_days)]
            cov = [_fmt(v) for v in s.covariates]
            for t, row in zip(s.visit_times, s.scores):
                w.writerow([s.subject_id, _fmt(t)] + [_fmt(v) for v in row] + cov + tail)
    return path


def _parse_float(cell: str, col: str, line: int) -> float | None:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        return float(cell)
    except ValueError:
        raise CohortParseError(f"column {col!r}: cannot parse {cell!r} as a number", line) from None


def load_cohort(path: str | Path, schema: CohortSchema | None = None) -> Cohort:
    """Read a cohort CSV, keeping complete cases only.

    Visits with any missing required cell are dropped, then subjects left with
    fewer than two visits.  Drop counts are logged and attached as
    ``cohort.load_report``.
    """
    schema = schema or default_schema()
    path = Path(path)
    report = LoadReport()
    rows: dict[str, list[tuple]] = {}
    required = ["subject_id", "visit_days"] + schema.test_names + list(schema.covariates) + [
        "endpoint_days", "converted"]

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError("empty file (no header row)", 1) from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise CohortParseError("header is missing columns: " + ", ".join(missing), 1)
        pos = {c: header.index(c) for c in header}
        has_death = "death_days" in pos

        for cells in reader:
            line = reader.line_num
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise CohortParseError(f"expected {len(header)} fields, found {len(cells)}", line)
            report.rows_read += 1
            sid = cells[pos["subject_id"]].strip()
            vals = {c: _parse_float(cells[pos[c]], c, line) for c in required[1:]}
            if not sid or any(v is None for v in vals.values()):
                report.rows_dropped_missing += 1
                if sid:
                    rows.setdefault(sid, [])
                continue
            death = _parse_float(cells[pos["death_days"]], "death_days", line) if has_death else None
            if vals["converted"] not in (0.0, 1.0):
                raise CohortParseError(f"converted must be 0 or 1, got {vals['converted']}", line)
            rows.setdefault(sid, []).append((line, vals, death))

    subjects = []
    for sid, visits in rows.items():
        report.subjects_read += 1
        if len(visits) < 2:
            report.subjects_dropped_single_visit += 1
            continue
        visits.sort(key=lambda r: r[1]["visit_days"])
        first_line, first, death = visits[0]
        for line, v, d in visits[1:]:
            if v["visit_days"] == visits[0][1]["visit_days"]:
                raise CohortParseError(f"subject {sid}: duplicate visit_days", line)
            if (v["endpoint_days"], v["converted"], d) != (first["endpoint_days"], first["converted"], death):
                raise CohortParseError(f"subject {sid}: endpoint fields differ between visits", line)
        times = np.array([v["visit_days"] for _, v, _ in visits])
        if np.any(np.diff(times) <= 0):
            raise CohortParseError(f"subject {sid}: duplicate visit_days", first_line)
        scores = np.array([[v[name] for name in schema.test_names] for _, v, _ in visits])
        cov = np.array([first[c] for c in schema.covariates])
        subjects.append(SubjectSeries(sid, times, scores, cov, bool(first["converted"]),
                                      first["endpoint_days"], death))

    log.info("loaded %s: %d rows, %d dropped for missing cells, %d subjects kept, %d dropped (<2 visits)",
             path, report.rows_read, report.rows_dropped_missing, len(subjects),
             report.subjects_dropped_single_visit)
    if not subjects:
        warnings.warn(f"{path}: no subject has two or more complete visits; cohort is empty")
    else:
        sd = np.vstack([s.scores for s in subjects]).std(axis=0)
        flat = [name for name, v in zip(schema.test_names, sd) if not v > 0]
        if flat:
            raise DegenerateColumnError("zero variance in test column(s): " + ", ".join(flat))
    return Cohort(subjects, schema, load_report=report)


# ---------------------------------------------------------------------------
# preprocessing


def standardize_tests(cohort: Cohort,
                      stats: dict[str, tuple[float, float]] | None = None) -> Cohort:
    """Sign-flip flagged tests, then z-score every test over all subject-visits.

    Pass ``stats`` (e.g. a training cohort's ``standardization``) to apply a
    frozen transform instead of estimating one.  A cohort that is already
    standardized is not flipped again, so the operation is idempotent.
    """
    y = cohort.stacked_scores().copy()
    already = cohort.standardization is not None
    if not already:
        for t in cohort.test_catalog:
            if t.sign_flip:
                y[:, t.index] *= -1.0

    if stats is not None and not already:
        used = {t.name: stats[t.name] for t in cohort.test_catalog}
        for t in cohort.test_catalog:
            mean, sd = used[t.name]
            if not sd > 0:
                raise DegenerateColumnError(f"test {t.name!r}: frozen sd must be positive")
            y[:, t.index] = (y[:, t.index] - mean) / sd
        return cohort.with_stacked_scores(y, standardization=dict(used))

    if y.shape[0] == 0:
        raise DegenerateColumnError("cannot standardize an empty cohort")
    mean = y.mean(axis=0)
    sd = y.std(axis=0)
    for t in cohort.test_catalog:
        if not sd[t.index] > 0:
            raise DegenerateColumnError(f"test {t.name!r} has zero variance")
    y = (y - mean) / sd
    if already:
        # re-standardizing only removes round-off; keep the original raw-scale stats
        return cohort.with_stacked_scores(y)
    used = {t.name: (float(mean[t.index]), float(sd[t.index])) for t in cohort.test_catalog}
    return cohort.with_stacked_scores(y, standardization=used)


def design_matrix(cohort: Cohort) -> np.ndarray:
    """Intercept plus baseline covariates, one row per visit."""
    x = cohort.stacked_covariates()
    return np.column_stack([np.ones(x.shape[0]), x])


def collinear_columns(x: np.ndarray, names: Sequence[str], tol: float | None = None) -> list[str]:
    """Names of columns that add no rank when appended left to right."""
    bad = []
    kept: list[int] = []
    for j in range(x.shape[1]):
        trial = x[:, kept + [j]]
        if np.linalg.matrix_rank(trial, tol=tol) <= len(kept):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def residualize_covariates(cohort: Cohort,
                           beta: np.ndarray | None = None) -> tuple[Cohort, np.ndarray]:
    """Remove pooled linear covariate effects from every test score.

    Returns the adjusted cohort and the ``(1 + P, K)`` coefficient matrix whose
    first row is the intercept.  Supplying ``beta`` applies a frozen fit.
    """
    x = design_matrix(cohort)
    y = cohort.stacked_scores()
    if beta is None:
        names = ["intercept"] + list(cohort.schema.covariates)
        if x.shape[0] < x.shape[1] or np.linalg.matrix_rank(x) < x.shape[1]:
            raise RankDeficientError(collinear_columns(x, names) or names[x.shape[0]:])
        beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    else:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (x.shape[1], y.shape[1]):
            raise CohortError(f"beta has shape {beta.shape}, expected {(x.shape[1], y.shape[1])}")
    resid = y - x @ beta
    return cohort.with_stacked_scores(resid, adjustment=beta), beta


def preprocess(cohort: Cohort,
               stats: dict[str, tuple[float, float]] | None = None,
               beta: np.ndarray | None = None) -> tuple[Cohort, np.ndarray]:
    """Standardize then residualize; pass frozen ``stats``/``beta`` for held-out data."""
    std = standardize_tests(cohort, stats)
    return residualize_covariates(std, beta)


def split_cohort(cohort: Cohort, seed: int, p_train: float = 0.5) -> tuple[Cohort, Cohort]:
    """Independent Bernoulli(p_train) assignment of each subject to train/test."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    to_train = rng.random(len(cohort.subjects)) < p_train
    train = [s for s, t in zip(cohort.subjects, to_train) if t]
    test = [s for s, t in zip(cohort.subjects, to_train) if not t]
    return replace(cohort, subjects=train), replace(cohort, subjects=test)
