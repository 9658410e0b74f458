import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cogfactor.data_model import (Cohort, CohortParseError, DegenerateColumnError, RankDeficientError,
                                  SubjectSeries, default_schema, load_cohort, preprocess,
                                  residualize_covariates, save_cohort, split_cohort, standardize_tests)
from cogfactor.synthetic import GenConfig, generate_cohort, write_cohort

from conftest import make_cohort, tiny_schema


def one_column_cohort(values, flip=False):
    schema = tiny_schema(1, 1, [flip])
    return Cohort([SubjectSeries("a", np.arange(len(values)) * 100.0, np.array(values)[:, None], [0.0])],
                  schema)


def test_default_schema():
    s = default_schema()
    assert s.n_tests == 10
    assert [t.name for t in s.tests if t.sign_flip] == ["digit_span_forward", "digit_span_backward"]
    assert s.n_covariates == 13


def test_standardize_examples():
    out = standardize_tests(one_column_cohort([1.0, 2.0, 3.0])).stacked_scores()[:, 0]
    np.testing.assert_allclose(out, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
    out = standardize_tests(one_column_cohort([1.0, 2.0, 3.0], flip=True)).stacked_scores()[:, 0]
    np.testing.assert_allclose(out, [1.224744871391589, 0.0, -1.224744871391589], atol=1e-12)


def test_standardize_zero_variance():
    with pytest.raises(DegenerateColumnError):
        standardize_tests(one_column_cohort([2.0, 2.0, 2.0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_standardize_moments_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    c = make_cohort(rng, n=8, K=3)
    c = c.with_stacked_scores(c.stacked_scores() * rng.uniform(0.1, 50, 3) + rng.normal(0, 20, 3))
    once = standardize_tests(c)
    y = once.stacked_scores()
    assert np.all(np.abs(y.mean(axis=0)) < 1e-12)
    assert np.all(np.abs(y.std(axis=0) - 1) < 1e-12)
    twice = standardize_tests(once)
    np.testing.assert_allclose(twice.stacked_scores(), y, atol=1e-12)
    assert twice.standardization == once.standardization


def test_frozen_standardization_applies_training_stats(rng):
    train = make_cohort(rng, 30, K=2)
    test = make_cohort(rng, 10, K=2)
    st_train = standardize_tests(train)
    st_test = standardize_tests(test, st_train.standardization)
    (m0, s0), _ = st_train.standardization.values()
    np.testing.assert_allclose(st_test.stacked_scores()[:, 0], (test.stacked_scores()[:, 0] - m0) / s0)


def test_all_zero_covariate_is_rank_deficient(rng):
    c = make_cohort(rng, 15, K=2, P=1)
    zero = [SubjectSeries(s.subject_id, s.visit_times, s.scores, [0.0], s.converted, s.endpoint_days)
            for s in c.subjects]
    with pytest.raises(RankDeficientError) as err:
        residualize_covariates(standardize_tests(Cohort(zero, c.schema)))
    assert "c0" in str(err.value)


def test_residualize_intercept_only_design(rng):
    c = standardize_tests(make_cohort(rng, 15, K=2, P=0, schema=tiny_schema(2, 0)))
    adj, beta = residualize_covariates(c)
    np.testing.assert_allclose(adj.stacked_scores(), c.stacked_scores(), atol=1e-12)
    assert beta.shape == (1, 2)


def test_residualize_exact_linear(rng):
    c = make_cohort(rng, 12, K=1, P=1, schema=tiny_schema(1, 1))
    x = c.stacked_covariates()[:, 0]
    c = c.with_stacked_scores((0.5 * x)[:, None])
    adj, beta = residualize_covariates(c)
    np.testing.assert_allclose(adj.stacked_scores(), 0.0, atol=1e-12)
    assert beta[1, 0] == pytest.approx(0.5, abs=1e-12)


def test_residualize_normal_equations_oracle(rng):
    schema = tiny_schema(3, 4)
    subs = [SubjectSeries(f"s{i}", [0.0, 300.0, 700.0, 1000.0], rng.normal(size=(4, 3)), rng.normal(size=4))
            for i in range(25)]
    c = Cohort(subs, schema)
    adj, beta = residualize_covariates(c)
    X = np.column_stack([np.ones(100), c.stacked_covariates()])
    y = c.stacked_scores()
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(beta, oracle, atol=1e-10)
    assert np.all(np.abs(X.T @ adj.stacked_scores()) < 1e-8)


def test_residualize_frozen_beta_shape_check(rng):
    c = make_cohort(rng, 10, K=2, P=1)
    with pytest.raises(Exception):
        residualize_covariates(c, np.zeros((3, 2)))


def _write(tmp_path, text):
    p = tmp_path / "c.csv"
    p.write_text(text)
    return p


HEADER = "subject_id,visit_days,t0,t1,c0,endpoint_days,converted,death_days\n"


def test_load_complete_case_rule(tmp_path):
    text = HEADER + (
        "a,0,1,2,5,900,0,\n"
        "a,365,2,3,5,900,0,\n"
        "b,0,1,,4,800,1,\n"
        "b,365,3,1,4,800,1,\n"
        "c,0,2,2,1,700,0,\n"
        "c,300,,1,1,700,0,\n"
        "c,600,1,0,1,700,0,\n")
    c = load_cohort(_write(tmp_path, text), tiny_schema(2, 1))
    ids = [s.subject_id for s in c.subjects]
    assert ids == ["a", "c"]
    assert c.by_id()["c"].n_visits == 2
    assert c.load_report.rows_dropped_missing == 2
    assert c.load_report.subjects_dropped_single_visit == 1


def test_load_single_visit_file_warns(tmp_path):
    text = HEADER + "a,0,1,2,5,900,0,\nb,0,2,3,5,900,0,\n"
    with pytest.warns(UserWarning, match="empty"):
        c = load_cohort(_write(tmp_path, text), tiny_schema(2, 1))
    assert len(c) == 0


def test_load_parse_error_line_number(tmp_path):
    text = HEADER + "a,0,1,2,5,900,0,\na,365,x,2,5,900,0,\n"
    with pytest.raises(CohortParseError) as err:
        load_cohort(_write(tmp_path, text), tiny_schema(2, 1))
    assert err.value.line == 3
    assert "line 3" in str(err.value)


def test_load_ragged_row(tmp_path):
    text = HEADER + "a,0,1,2,5,900\n"
    with pytest.raises(CohortParseError):
        load_cohort(_write(tmp_path, text), tiny_schema(2, 1))


def test_load_degenerate_column(tmp_path):
    text = HEADER + "a,0,1,2,5,900,0,\na,365,1,3,5,900,0,\n"
    with pytest.raises(DegenerateColumnError):
        load_cohort(_write(tmp_path, text), tiny_schema(2, 1))


def test_round_trip_synthetic(tmp_path):
    c = generate_cohort(GenConfig(n_subjects=50, seed=5))
    p = write_cohort(c, tmp_path / "a.csv")
    back = load_cohort(p)
    assert back == c
    p2 = save_cohort(back, tmp_path / "b.csv")
    assert p.read_bytes() == p2.read_bytes()
    assert load_cohort(p2) == back


def test_split_is_deterministic_and_partitions(rng):
    c = make_cohort(rng, 200)
    a1, b1 = split_cohort(c, 7)
    a2, b2 = split_cohort(c, 7)
    assert [s.subject_id for s in a1.subjects] == [s.subject_id for s in a2.subjects]
    assert len(a1) + len(b1) == 200
    ids = {s.subject_id for s in a1.subjects} | {s.subject_id for s in b1.subjects}
    assert len(ids) == 200


def test_preprocess_with_frozen_transform(rng):
    train = make_cohort(rng, 40, K=2, P=1)
    test = make_cohort(rng, 10, K=2, P=1)
    adj, beta = preprocess(train)
    adj_test, beta_test = preprocess(test, adj.standardization, beta)
    assert np.array_equal(beta, beta_test)
    assert adj_test.standardization == adj.standardization


def test_visit_times_must_increase():
    with pytest.raises(Exception):
        SubjectSeries("x", [0.0, 0.0], np.zeros((2, 1)), [0.0])
