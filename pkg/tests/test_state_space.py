import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cogfactor.data_model import SubjectSeries
from cogfactor.state_space import (StateSpaceError, StateSpaceParams, backward_sample, ffbs_sample,
                                   joint_gaussian_oracle, joint_log_likelihood, kalman_filter,
                                   kalman_smoother, smoothed_trajectory, visit_deltas)

from conftest import random_instance, random_params


def test_noiseless_single_visit():
    p = StateSpaceParams.default([[1.0]], [1e-12])
    f = kalman_filter((np.array([[2.0]]), np.array([0.0])), p)
    assert f.means[0, 0] == pytest.approx(2.0, abs=1e-9)


def test_zero_visits_is_an_error():
    p = StateSpaceParams.default([[1.0]], [1.0])
    with pytest.raises(StateSpaceError):
        kalman_filter((np.empty((0, 1)), np.empty(0)), p)
    with pytest.raises(StateSpaceError):
        joint_gaussian_oracle((np.empty((0, 1)), np.empty(0)), p)


def test_conjugate_1d_oracle():
    p = StateSpaceParams([[1.0]], [1.0], [[1.0]], [0.0], [[1.0]])
    mean, cov = joint_gaussian_oracle((np.array([[1.0]]), np.array([0.0])), p)
    assert mean[0] == pytest.approx(0.5)
    assert cov[0, 0] == pytest.approx(0.5)


def test_flat_prior_limit_is_weighted_least_squares(rng):
    G = rng.normal(size=(4, 2))
    s = rng.uniform(0.5, 2.0, 4)
    y = rng.normal(size=(1, 4))
    p = StateSpaceParams(G, s, np.eye(2), np.zeros(2), 1e9 * np.eye(2))
    mean, _ = joint_gaussian_oracle((y, np.array([0.0])), p)
    W = np.diag(1 / s)
    wls = np.linalg.solve(G.T @ W @ G, G.T @ W @ y[0])
    np.testing.assert_allclose(mean, wls, atol=1e-6)
    f = kalman_filter((y, np.array([0.0])), p)
    np.testing.assert_allclose(f.means[0], wls, atol=1e-6)


def test_visit_deltas_years():
    np.testing.assert_allclose(visit_deltas([0.0, 365.25, 1095.75]), [0.0, 1.0, 2.0])


def test_random_instances_match_oracle(rng):
    for _ in range(100):
        y, d, p = random_instance(rng)
        J, Q = y.shape[0], p.n_factors
        f = kalman_filter((y, d), p)
        s = kalman_smoother(f, p)
        mean, cov = joint_gaussian_oracle((y, d), p)
        np.testing.assert_allclose(s.means.reshape(-1), mean, atol=1e-8)
        for j in range(J):
            np.testing.assert_allclose(s.covs[j], cov[j * Q:(j + 1) * Q, j * Q:(j + 1) * Q], atol=1e-8)
            # filtered quantities: condition on the first j+1 visits only
            m_j, c_j = joint_gaussian_oracle((y[:j + 1], d[:j + 1]), p)
            np.testing.assert_allclose(f.means[j], m_j[j * Q:], atol=1e-8)
            np.testing.assert_allclose(f.covs[j], c_j[j * Q:, j * Q:], atol=1e-8)
        assert f.log_likelihood == pytest.approx(joint_log_likelihood((y, d), p), abs=1e-8)


def test_single_visit_smoother_equals_filter(rng):
    y, d, p = random_instance(rng, J=1)
    f = kalman_filter((y, d), p)
    s = kalman_smoother(f, p)
    np.testing.assert_array_equal(s.means, f.means)
    np.testing.assert_array_equal(s.covs, f.covs)


def test_noiseless_smoother_inverts_G(rng):
    G = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    p = StateSpaceParams(G, [1e-12, 1e-12], np.eye(2), np.zeros(2), 10 * np.eye(2))
    y = rng.normal(size=(3, 2))
    s = smoothed_trajectory((y, np.array([0.0, 1.0, 0.5])), p)
    np.testing.assert_allclose(s.values, np.linalg.solve(G, y.T).T, atol=1e-6)
    assert s.kind == "smoothed_mean"


def test_delta_scaling_law(rng):
    y, d, p = random_instance(rng, J=4)
    f1 = kalman_filter((y, d), p)
    f2 = kalman_filter((y, 2 * d), p)
    for j in range(1, 4):
        inc1 = f1.pred_covs[j] - f1.covs[j - 1]
        inc2 = f2.pred_covs[j] - f2.covs[j - 1]
        np.testing.assert_allclose(inc2, 2 * inc1, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_smoothed_below_filtered(seed):
    rng = np.random.default_rng(seed)
    y, d, p = random_instance(rng)
    f = kalman_filter((y, d), p)
    s = kalman_smoother(f, p)
    for j in range(y.shape[0]):
        assert np.linalg.eigvalsh(f.covs[j] - s.covs[j]).min() > -1e-10
        assert np.linalg.eigvalsh(f.covs[j]).min() > -1e-12


def test_subject_series_input_matches_tuple(rng):
    p = random_params(rng, 3, 2)
    series = SubjectSeries("s", [0.0, 400.0, 900.0], rng.normal(size=(3, 3)), [])
    a = kalman_filter(series, p)
    b = kalman_filter((series.scores, visit_deltas(series.visit_times)), p)
    np.testing.assert_array_equal(a.means, b.means)


def test_ffbs_determinism_and_degenerate_limit(rng):
    y, d, p = random_instance(rng, J=3, K=3, Q=2)
    f = kalman_filter((y, d), p)
    a = ffbs_sample(f, p, np.random.default_rng(3)).values
    b = ffbs_sample(f, p, np.random.default_rng(3)).values
    np.testing.assert_array_equal(a, b)

    tight = StateSpaceParams(p.G, np.full(3, 1e-14), p.sigma_eta * 1e-12, p.m0, p.P0 * 1e-12)
    f = kalman_filter((y, d), tight)
    draw = ffbs_sample(f, tight, np.random.default_rng(0)).values
    np.testing.assert_allclose(draw, kalman_smoother(f, tight).means, atol=1e-4)


def test_ffbs_moments_against_oracle():
    rng = np.random.default_rng(11)
    y, d, p = random_instance(rng, J=3, K=3, Q=2)
    f = kalman_filter((y, d), p)
    mean, cov = joint_gaussian_oracle((y, d), p)
    n = 20_000
    z = np.random.default_rng(5).standard_normal((n, 3, 2))
    draws = np.array([backward_sample(f, p, z[i]) for i in range(n)]).reshape(n, -1)
    se = draws.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se)
    emp = np.cov(draws, rowvar=False)
    for j in range(3):
        blk = slice(2 * j, 2 * j + 2)
        rel = np.abs(emp[blk, blk] - cov[blk, blk]) / np.sqrt(np.outer(np.diag(cov[blk, blk]),
                                                                      np.diag(cov[blk, blk])))
        assert rel.max() < 0.05


def test_oracle_dimension_cap(rng):
    p = random_params(rng, 10, 4)
    y = rng.normal(size=(4, 10))
    with pytest.raises(ValueError):
        joint_gaussian_oracle((y, np.array([0.0, 1.0, 1.0, 1.0])), p)


def test_params_validation():
    with pytest.raises(ValueError):
        StateSpaceParams.default([[1.0, 0.0]], [1.0, 2.0])
    p = StateSpaceParams.default([[1.0]], [-1.0])
    with pytest.raises(ValueError):
        p.validate()
