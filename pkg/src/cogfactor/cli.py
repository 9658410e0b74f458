"""Command-line driver for the cohort -> factors -> risk -> trial pipeline.

Every command reads and writes inside ``--out``; later commands pick up the
artifacts of earlier ones from there.  A TOML file passed with ``--config``
may hold top-level ``seed``/``profile``/``out`` keys and one table per
command (``[generate]``, ``[fit_factors]``, ``[fit_risk]``, ``[run_trial]``).

Exit status: 0 on success, 1 on a numerical failure, 2 on a usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import _kernels
from .data_model import Cohort, CohortError, load_cohort, preprocess, save_cohort, split_cohort, standardize_tests
from .gibbs import GibbsConfig, GibbsError, PosteriorSummary, battery_structure, run_gibbs
from .risk_model import (LogisticFit, ModelRow, RiskModelError, balanced_threshold_from_probs, baseline_dataset,
                         fit_logistic, fit_model_row, high_risk_subset, select_final_model, training_dataset,
                         write_model_table)
from .synthetic import GenConfig, generate_cohort
from .trial_sim import (TrialConfig, TrialError, derive_true_outcomes, run_trial_grid, selection_pools)

log = logging.getLogger("cogfactor")

PROFILES = ("desk", "full")
# desk keeps every stage to minutes on one core
PROFILE_DEFAULTS = {
    "desk": {"n_subjects": 2000, "n_iter": 2000, "burn_in": 1000, "n_replicates": 2000},
    "full": {"n_subjects": 2000, "n_iter": 10000, "burn_in": 5000, "n_replicates": 10000},
}
SECTIONS = ("generate", "fit_factors", "fit_risk", "run_trial")


class UsageError(Exception):
    """Bad arguments, configuration or missing inputs (exit status 2)."""


class NumericalFailure(Exception):
    """A model fit or sampler failed (exit status 1)."""


# artifact names inside the output directory
TRAIN_CSV = "train.csv"
TEST_CSV = "test.csv"
GENERATE_JSON = "generate_config.json"
PREPROCESS_JSON = "preprocess.json"
POSTERIOR_JSON = "posterior.json"
SCORES_CSV = "factor_scores.csv"
TABLE_CSV = "table2.csv"
FINAL_JSON = "final_model.json"
GRID_CSV = "trial_grid.csv"
HR_DIR = "hr_distributions"
FIG_DIR = "figures"
REPORT_TXT = "report.txt"


@dataclass
class RunConfig:
    seed: int = 0
    out: Path = Path("cogfactor_out")
    profile: str = "desk"
    sections: dict[str, dict[str, Any]] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.sections.get(name, {}))

    def defaults(self) -> dict[str, int]:
        return PROFILE_DEFAULTS[self.profile]

    def path(self, name: str) -> Path:
        return self.out / name

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        data: dict[str, Any] = {}
        if args.config is not None:
            p = Path(args.config)
            if not p.is_file():
                raise UsageError(f"config file not found: {p}")
            try:
                data = tomllib.loads(p.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise UsageError(f"{p}: invalid TOML: {exc}") from None
        unknown = set(data) - set(SECTIONS) - {"seed", "out", "profile"}
        if unknown:
            raise UsageError("unknown config keys: " + ", ".join(sorted(unknown))
                             + f"; expected seed, out, profile and tables {', '.join(SECTIONS)}")
        seed = args.seed if args.seed is not None else data.get("seed", 0)
        profile = args.profile or data.get("profile", "desk")
        out = args.out or data.get("out", "cogfactor_out")
        if profile not in PROFILES:
            raise UsageError(f"profile must be one of {PROFILES}, got {profile!r}")
        if not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        sections = {}
        for name in SECTIONS:
            sec = data.get(name, {})
            if not isinstance(sec, dict):
                raise UsageError(f"[{name}] must be a table")
            sections[name] = sec
        return cls(seed, Path(out), profile, sections)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise UsageError(f"required input not found: {path}")
    return path


def _write_json(path: Path, obj: Any) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> list[Path]:
    sec = cfg.section("generate")
    p_train = sec.pop("p_train", 0.5)
    sec.setdefault("n_subjects", cfg.defaults()["n_subjects"])
    sec["seed"] = cfg.seed
    if not sec.get("n_subjects"):
        raise UsageError("[generate] needs n_subjects >= 1 (see GenConfig fields in the README)")
    try:
        gen = GenConfig.from_mapping(sec)
        gen.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[generate]: {exc}") from None
    cohort = generate_cohort(gen)
    train, test = split_cohort(cohort, cfg.seed, p_train)
    cfg.out.mkdir(parents=True, exist_ok=True)
    log.info("generated %d subjects: %d train, %d test", len(cohort), len(train), len(test))
    return [save_cohort(train, cfg.path(TRAIN_CSV)), save_cohort(test, cfg.path(TEST_CSV)),
            _write_json(cfg.path(GENERATE_JSON), {**gen.to_mapping(), "p_train": p_train})]


def _load(path: Path) -> Cohort:
    try:
        return load_cohort(_require(path))
    except CohortError as exc:
        raise UsageError(str(exc)) from None


def _gibbs_config(cfg: RunConfig) -> GibbsConfig:
    sec = cfg.section("fit_factors")
    d = cfg.defaults()
    try:
        return GibbsConfig(n_iter=int(sec.get("n_iter", d["n_iter"])),
                           burn_in=int(sec.get("burn_in", d["burn_in"])),
                           loading_structure=battery_structure(), seed=cfg.seed,
                           thin=int(sec.get("thin", 0)), backend=sec.get("backend"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[fit_factors]: {exc}") from None


def cmd_fit_factors(cfg: RunConfig) -> list[Path]:
    train = _load(cfg.path(TRAIN_CSV))
    adj, beta = preprocess(train)
    gcfg = _gibbs_config(cfg)
    try:
        gcfg.validate()
    except ValueError as exc:
        raise UsageError(f"[fit_factors]: {exc}") from None
    t0 = time.perf_counter()
    try:
        post = run_gibbs(adj, gcfg, progress=True)
    except GibbsError as exc:
        dump = _write_json(cfg.path("gibbs_failure.json"),
                           {"error": str(exc), "iteration": exc.iteration, "seed": cfg.seed})
        raise NumericalFailure(f"sampler failed at iteration {exc.iteration}: {exc} (details in {dump})") from None
    log.info("gibbs finished in %.1f s", time.perf_counter() - t0)
    _print_diagnostics(post)
    pre = {"standardization": {k: list(v) for k, v in adj.standardization.items()},
           "adjustment": beta.tolist(), "schema": train.schema.to_dict()}
    return [_write_json(cfg.path(PREPROCESS_JSON), pre),
            post.write_json(cfg.path(POSTERIOR_JSON)),
            post.write_factor_scores(cfg.path(SCORES_CSV))]


def _print_diagnostics(post: PosteriorSummary) -> None:
    print(f"{'parameter':<22}{'mean':>10}{'sd':>10}{'R-hat':>8}")
    for name, d in post.diagnostics["parameters"].items():
        print(f"{name:<22}{d['mean']:>10.4f}{d['sd']:>10.4f}{d['split_rhat']:>8.3f}")


def _read_preprocess(cfg: RunConfig) -> tuple[dict, np.ndarray]:
    pre = json.loads(_require(cfg.path(PREPROCESS_JSON)).read_text())
    stats = {k: tuple(v) for k, v in pre["standardization"].items()}
    return stats, np.array(pre["adjustment"])


def _read_posterior(cfg: RunConfig) -> PosteriorSummary:
    return PosteriorSummary.read(_require(cfg.path(POSTERIOR_JSON)), _require(cfg.path(SCORES_CSV)))


def cmd_fit_risk(cfg: RunConfig) -> list[Path]:
    sec = cfg.section("fit_risk")
    alpha = float(sec.get("alpha", 0.05))
    train = _load(cfg.path(TRAIN_CSV))
    stats, _ = _read_preprocess(cfg)
    post = _read_posterior(cfg)
    std = standardize_tests(train, stats)
    factors = list(post.factor_names)
    scores = {sid: post.scores_for(sid) for sid in post.subject_ids}
    data = training_dataset(std, scores, factors)
    covariates = list(train.schema.covariates)
    rows = [fit_model_row(t, data, [t], covariates) for t in train.schema.test_names]
    rows += [fit_model_row(f, data, [f], covariates) for f in factors]
    try:
        full = fit_logistic(data, factors + covariates)
        final = select_final_model(full, data, factors, alpha)
        cov_only = fit_logistic(data, covariates)
    except RiskModelError as exc:
        raise NumericalFailure(f"risk model failed: {exc}") from None
    bt = balanced_threshold_from_probs(final.predict_proba(data), data.outcome)
    final.threshold = bt.threshold
    kept = [t for t in final.terms if t in factors]
    rows.append(ModelRow("final", kept, final, bt.sensitivity, bt.specificity, bt.threshold,
                         ";".join(final.flags)))
    cbt = balanced_threshold_from_probs(cov_only.predict_proba(data), data.outcome)
    cov_only.threshold = cbt.threshold
    for r in rows:
        if r.flag:
            log.warning("model %s flagged: %s", r.model, r.flag)
    summary = {"full_model": full.to_dict(), "final_model": final.to_dict(),
               "covariate_model": cov_only.to_dict(), "retained_factors": kept,
               "balanced_threshold": bt.threshold, "sensitivity": bt.sensitivity,
               "specificity": bt.specificity, "n_train_rows": len(data),
               "event_rate": float(data.outcome.mean()), "alpha": alpha}
    print(f"final model factors: {', '.join(kept) or '(none)'}; threshold {bt.threshold:.3f} "
          f"sensitivity {bt.sensitivity:.3f} specificity {bt.specificity:.3f}")
    return [write_model_table(rows, cfg.path(TABLE_CSV)), _write_json(cfg.path(FINAL_JSON), summary)]


def _trial_config(cfg: RunConfig) -> tuple[TrialConfig, Any, float]:
    sec = cfg.section("run_trial")
    threshold = sec.pop("threshold", "balanced")
    hist_effect = float(sec.pop("hist_effect", 0.2))
    sec.setdefault("n_replicates", cfg.defaults()["n_replicates"])
    for key in ("effects", "methods"):
        if key in sec:
            sec[key] = tuple(sec[key])
    try:
        tc = TrialConfig(seed=cfg.seed, **sec)
        tc.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[run_trial]: {exc}") from None
    if threshold != "balanced" and not (isinstance(threshold, (int, float)) and 0 <= threshold <= 1):
        raise UsageError("[run_trial] threshold must be 'balanced' or a probability")
    return tc, threshold, hist_effect


def cmd_run_trial(cfg: RunConfig) -> list[Path]:
    tc, threshold, hist_effect = _trial_config(cfg)
    test = _load(cfg.path(TEST_CSV))
    stats, beta = _read_preprocess(cfg)
    post = _read_posterior(cfg)
    models = json.loads(_require(cfg.path(FINAL_JSON)).read_text())
    final = LogisticFit.from_dict(models["final_model"])
    cov_model = LogisticFit.from_dict(models["covariate_model"])
    thr = models["balanced_threshold"] if threshold == "balanced" else float(threshold)

    std = standardize_tests(test, stats)
    adj, _ = preprocess(test, stats, beta)
    data = baseline_dataset(std, adj, post.params(), post.factor_names)
    high = {"factor_model": high_risk_subset(final, data, thr),
            "covariate_model": high_risk_subset(cov_model, data, thr)}
    overlap = len(high["factor_model"] & high["covariate_model"])
    log.info("high-risk subsets at %.3f: factor %d, covariate %d, overlap %d",
             thr, len(high["factor_model"]), len(high["covariate_model"]), overlap)
    records = derive_true_outcomes(test)
    pools = selection_pools(records, high)
    for m in tc.methods:
        if len(pools[m]) == 0:
            raise NumericalFailure(f"high-risk subset for {m} is empty at threshold {thr}")
    t0 = time.perf_counter()
    grid = run_trial_grid(tc, records, pools)
    log.info("trial grid finished in %.1f s", time.perf_counter() - t0)
    paths = [grid.write_grid_csv(cfg.path(GRID_CSV))]
    paths += grid.write_hr_distributions(cfg.path(HR_DIR))
    paths += grid.write_figure_data(cfg.path(FIG_DIR), hist_effect)
    subsets = {"threshold": thr, "sizes": {m: len(s) for m, s in high.items()}, "overlap": overlap,
               "n_test": len(test),
               "dispositions": {d: sum(1 for r in records if r.event.name.lower() == d)
                                for d in ("converted", "censored", "death_censored", "lost_to_follow_up")}}
    paths.append(_write_json(cfg.path("trial_subsets.json"), subsets))
    return paths


def cmd_report(cfg: RunConfig) -> list[Path]:
    lines = [f"seed {cfg.seed}, profile {cfg.profile}"]
    if cfg.path(FINAL_JSON).is_file():
        m = json.loads(cfg.path(FINAL_JSON).read_text())
        lines.append(f"final model factors: {', '.join(m['retained_factors']) or '(none)'}")
        lines.append(f"balanced threshold {m['balanced_threshold']:.3f}: sensitivity {m['sensitivity']:.3f}, "
                     f"specificity {m['specificity']:.3f}")
    grid_path = _require(cfg.path(GRID_CSV))
    with grid_path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    lines.append(f"{'method':<18}{'effect':>7}{'power':>8}{'required N':>13}{'median HR':>11}{'failed':>8}")
    for r in rows:
        req = float(r["median_required_n"])
        req_s = "inf" if math.isinf(req) else f"{req:.0f}"
        lines.append(f"{r['method']:<18}{float(r['effect']):>7.2f}{float(r['median_power']):>8.3f}"
                     f"{req_s:>13}{float(r['median_hr']):>11.3f}{r['n_failed_replicates']:>8}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out = cfg.path(REPORT_TXT)
    out.write_text(text)
    return [out]


def cmd_pipeline(cfg: RunConfig) -> list[Path]:
    paths = []
    for step in (cmd_generate, cmd_fit_factors, cmd_fit_risk, cmd_run_trial, cmd_report):
        paths += step(cfg)
    return paths


COMMANDS = {
    "generate": cmd_generate,
    "fit-factors": cmd_fit_factors,
    "fit-risk": cmd_fit_risk,
    "run-trial": cmd_run_trial,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cogfactor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="top-level seed (unsigned 64-bit)")
        sp.add_argument("--out", help="output directory (default cogfactor_out)")
        sp.add_argument("--profile", choices=PROFILES, help="desk (minutes) or full scale")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_args(args)
        paths = COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"cogfactor: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, TrialError, RiskModelError, GibbsError, _kernels.KernelError,
            np.linalg.LinAlgError) as exc:
        print(f"cogfactor: numerical failure: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
