import math

import numpy as np
import pytest

from cogfactor.data_model import Cohort, SubjectSeries, default_schema
from cogfactor.risk_model import RiskDataset, balanced_threshold, fit_logistic, high_risk_subset
from cogfactor.synthetic import GenConfig, simulate
from cogfactor.trial_sim import (THREE_YEARS_DAYS, Disposition, RecordArrays, SurvivalRecord, TrialConfig,
                                 TrialError, apply_treatment, apply_treatment_records, cox_partial_loglik,
                                 derive_true_outcomes, fit_cox, fit_cox_records, posthoc_power,
                                 replicate_rng, replicate_summary, required_events, run_trial_grid,
                                 select_participants, selection_pools, summary_from_hr)
from cogfactor._kernels import cox_breslow


def subject(sid, times, converted=False, endpoint=None, death=None, apoe4=0.0):
    schema = default_schema()
    cov = np.zeros(schema.n_covariates)
    cov[schema.covariate_index("apoe4")] = apoe4
    cov[schema.covariate_index("education_years")] = 16.0
    times = np.asarray(times, dtype=float)
    return SubjectSeries(sid, times, np.zeros((len(times), schema.n_tests)), cov, converted,
                         times[-1] if endpoint is None else endpoint, death)


def test_derive_outcomes_examples():
    subs = [subject("conv", [0, 200, 400], converted=True, endpoint=600),
            subject("cens", [0, 200, 500, 1350]),
            subject("dead", [0, 200, 400], death=700),
            subject("ltfu", [0, 200]),
            subject("late", [0, 200, 1300, 2000], converted=True, endpoint=2000)]
    recs = {r.subject_id: r for r in derive_true_outcomes(Cohort(subs, default_schema()))}
    assert (recs["conv"].event, recs["conv"].time) == (Disposition.CONVERTED, 400.0)
    assert (recs["cens"].event, recs["cens"].time) == (Disposition.CENSORED, 1150.0)
    assert (recs["dead"].event, recs["dead"].time) == (Disposition.DEATH_CENSORED, 500.0)
    assert recs["ltfu"].event == Disposition.LOST_TO_FOLLOW_UP and not recs["ltfu"].analyzable
    # conversion past the 3.5 year window is censored at the visit closest to 3 years
    assert (recs["late"].event, recs["late"].time) == (Disposition.CENSORED, 1100.0)
    assert recs["conv"].adjusters == (0.0, 16.0, 0.0)


def test_derive_outcomes_needs_two_visits():
    with pytest.raises(TrialError):
        derive_true_outcomes(Cohort([subject("one", [0.0])], default_schema()))


def test_select_participants():
    pools = {"random": np.arange(50), "factor_model": np.array([], dtype=np.int64)}
    assert select_participants("random", pools, 0, np.random.default_rng(1)).size == 0
    a = select_participants("random", pools, 30, np.random.default_rng(1))
    b = select_participants("random", pools, 30, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(TrialError):
        select_participants("factor_model", pools, 5, np.random.default_rng(1))


@pytest.fixture(scope="module")
def synthetic_trial():
    """Records for a synthetic cohort plus a high-risk pool from a model on the true factors."""
    sc = simulate(GenConfig(n_subjects=2000, seed=31))
    records = derive_true_outcomes(sc.cohort)
    keep = [i for i, r in enumerate(records) if r.analyzable]
    cols = {f"f{q}": np.array([sc.alphas[i][1, q] for i in keep]) for q in range(4)}
    y = np.array([float(records[i].event == Disposition.CONVERTED) for i in keep])
    data = RiskDataset(cols, y, [records[i].subject_id for i in keep])
    fit = fit_logistic(data, list(cols))
    thr = balanced_threshold(fit, data).threshold
    pools = selection_pools(records, {"factor_model": high_risk_subset(fit, data, thr)})
    return RecordArrays.from_records(records), records, pools


def test_factor_selection_enriches_events(synthetic_trial):
    arrs, _, pools = synthetic_trial
    rates = {m: [] for m in ("random", "factor_model")}
    for r in range(500):
        for m in rates:
            idx = select_participants(m, pools, 1000, replicate_rng(7, 0, 0, r))
            rates[m].append(np.mean(arrs.status[idx] == Disposition.CONVERTED))
    assert np.mean(rates["factor_model"]) > np.mean(rates["random"])


def toy_records(n=200, conv_frac=0.5, seed=0):
    rng = np.random.default_rng(seed)
    conv = rng.random(n) < conv_frac
    time = np.where(conv, rng.uniform(30, 1200, n), THREE_YEARS_DAYS)
    status = np.where(conv, Disposition.CONVERTED, Disposition.CENSORED).astype(np.int64)
    return RecordArrays([f"s{i}" for i in range(n)], time, status, rng.normal(size=(n, 3)))


def test_treatment_near_one_censors_treated_converters():
    recs = toy_records()
    out = apply_treatment(recs, 0.999, np.random.default_rng(2))
    conv = recs.status == Disposition.CONVERTED
    treated_conv = (out.treated == 1) & conv
    assert out.event[treated_conv].mean() < 0.02
    assert np.all(out.time[treated_conv & (out.event == 0)] == THREE_YEARS_DAYS)


def test_treatment_effect_scales_treated_events():
    recs = toy_records()
    conv = recs.status == Disposition.CONVERTED
    observed = counterfactual = 0
    for r in range(10_000):
        out = apply_treatment(recs, 0.2, np.random.default_rng([5, r]))
        t = out.treated == 1
        observed += int(out.event[t].sum())
        counterfactual += int(conv[t].sum())
    assert observed / counterfactual == pytest.approx(0.8, rel=0.02)


def test_control_arm_bit_identical():
    recs = [SurvivalRecord(f"s{i}", float(10 + 7 * i), Disposition(i % 3), (1.0, 12.0, 0.0)) for i in range(60)]
    out = apply_treatment_records(recs, 0.5, np.random.default_rng(4))
    ctrl = [(a, b) for a, b in zip(recs, out) if b.arm == "control"]
    assert ctrl
    for a, b in ctrl:
        assert (a.subject_id, a.time, a.event, a.adjusters) == (b.subject_id, b.time, b.event, b.adjusters)
    treated = [(a, b) for a, b in zip(recs, out) if b.arm == "treatment"]
    for a, b in treated:
        if a.event != Disposition.CONVERTED:
            assert (a.time, a.event) == (b.time, b.event)


def test_zero_effect_changes_nothing():
    recs = toy_records()
    out = apply_treatment(recs, 0.0, np.random.default_rng(3))
    np.testing.assert_array_equal(out.time, recs.time)
    with pytest.raises(TrialError):
        apply_treatment(recs, 1.0, np.random.default_rng(3))


def test_two_subject_monotone_flag():
    fit = fit_cox([100.0, 200.0], [0, 1], [[1.0], [0.0]])
    assert fit.monotone and fit.flagged
    rep = replicate_summary(fit, 1, 2, TrialConfig())
    assert rep.power == 0.0 and math.isinf(rep.required_n) and rep.forced_zero


def test_cox_errors():
    with pytest.raises(TrialError):
        fit_cox([1.0, 2.0, 3.0], [0, 0, 0], [[1.0], [0.0], [1.0]])
    with pytest.raises(TrialError):
        fit_cox([1.0, 2.0, 3.0], [1, 0, 1], [[1.0], [1.0], [1.0]])


def test_null_effect_median_hr(synthetic_trial):
    arrs, _, pools = synthetic_trial
    hrs = []
    for r in range(1000):
        rng = replicate_rng(11, 0, 0, r)
        idx = select_participants("random", pools, 1000, rng)
        sub = RecordArrays([], arrs.time[idx], arrs.status[idx], arrs.adjusters[idx])
        out = apply_treatment(sub, 0.0, rng)
        a = out.analyzable
        fit = fit_cox(out.time[a], out.event[a], np.column_stack([out.treated[a], sub.adjusters[a]]))
        hrs.append(fit.hr)
    assert np.median(hrs) == pytest.approx(1.0, abs=0.05)


def grid_search_cox(t, ev, X, half=3.0, levels=7):
    order = np.argsort(t, kind="stable")
    t, ev, X = t[order], ev[order], X[order]
    c = np.zeros(2)
    for _ in range(levels):
        a = np.linspace(c[0] - half, c[0] + half, 41)
        b = np.linspace(c[1] - half, c[1] + half, 41)
        ll = np.array([[cox_breslow(t, ev, X, np.array([x, y]))[0] for y in b] for x in a])
        i, j = np.unravel_index(np.argmax(ll), ll.shape)
        c = np.array([a[i], b[j]])
        half /= 8.0
    return c


def test_cox_matches_grid_search_and_score_is_zero():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        n = 20
        arm = (np.arange(n) % 2).astype(float)
        z = rng.normal(size=n)
        t = np.round(rng.exponential(300 * np.exp(-0.5 * arm + 0.3 * z)) + 1)
        ev = (rng.random(n) < 0.8).astype(np.int8)
        X = np.column_stack([arm, z])
        fit = fit_cox(t, ev, X)
        assert fit.converged and not fit.flagged
        assert fit.grad_norm < 1e-8
        np.testing.assert_allclose(fit.coefficients, grid_search_cox(t, ev, X - X.mean(axis=0)), atol=1e-3)
        assert fit.log_likelihood == pytest.approx(cox_partial_loglik(t, ev, X, fit.coefficients), abs=1e-9)


def test_cox_records_wrapper():
    rng = np.random.default_rng(9)
    recs = []
    for i in range(80):
        ev = Disposition.CONVERTED if rng.random() < 0.4 else Disposition.CENSORED
        if i % 10 == 0:
            ev = Disposition.LOST_TO_FOLLOW_UP
        recs.append(SurvivalRecord(f"s{i}", float(rng.integers(1, 1200)), ev,
                                   (float(i % 2), float(rng.integers(10, 20)), float(i % 3 == 0)),
                                   "treatment" if i % 4 < 2 else "control"))
    fit = fit_cox_records(recs)
    assert fit.n_obs == 72 and fit.names[0] == "treatment"
    assert fit.grad_norm < 1e-8


def test_required_events():
    assert required_events(0.8, 0.05, 0.8, 0.5) == 631
    assert math.isinf(required_events(1.0))
    for hr in (0.5, 0.7, 0.9, 0.95):
        assert required_events(hr) == required_events(1.0 / hr)


def test_replicate_summary_rules():
    cfg = TrialConfig()
    rep = summary_from_hr(1.2, 100, 1000, cfg)
    assert rep.power == 0.0 and math.isinf(rep.required_n)
    rep = summary_from_hr(0.8, 631, 6310, cfg)
    assert rep.power == pytest.approx(0.80, abs=0.005)
    assert rep.event_probability == pytest.approx(0.1)
    assert rep.required_n == pytest.approx(6310.0)
    assert posthoc_power(0.8, 631) == pytest.approx(posthoc_power(1.25, 631))
    with pytest.raises(TrialError):
        summary_from_hr(0.8, 0, 0, cfg)


def test_trial_config_validation():
    with pytest.raises(ValueError):
        TrialConfig(n_enrolled=1).validate()
    with pytest.raises(ValueError):
        TrialConfig(effects=(0.2, 1.0)).validate()
    with pytest.raises(ValueError):
        TrialConfig(methods=("lottery",)).validate()


def test_grid_monotone_and_deterministic(synthetic_trial, tmp_path):
    _, records, pools = synthetic_trial
    cfg = TrialConfig(n_enrolled=1000, methods=("random", "factor_model"), effects=(0.1, 0.3, 0.5),
                      n_replicates=100, seed=3)
    grid = run_trial_grid(cfg, records, pools)
    for m in cfg.methods:
        power = [grid.cell(m, e).median_power for e in cfg.effects]
        assert power == sorted(power)
        assert grid.cell(m, 0.5).median_hr < grid.cell(m, 0.1).median_hr
    again = run_trial_grid(cfg, records, pools)
    a = grid.write_grid_csv(tmp_path / "a.csv").read_bytes()
    b = again.write_grid_csv(tmp_path / "b.csv").read_bytes()
    assert a == b
    assert len(a.decode().splitlines()) == 1 + 6
    files = grid.write_hr_distributions(tmp_path / "hr")
    assert len(files) == 6
    assert len(files[0].read_text().splitlines()) == 1 + 100


def test_grid_counts_failures():
    recs = [SurvivalRecord(f"s{i}", 100.0 + i, Disposition.CENSORED, (0.0, 12.0, 1.0)) for i in range(20)]
    cfg = TrialConfig(n_enrolled=10, methods=("random",), effects=(0.2,), n_replicates=5)
    grid = run_trial_grid(cfg, recs, {"random": np.arange(20)})
    cell = grid.cell("random", 0.2)
    assert cell.n_failed == 5 and not cell.replicates
