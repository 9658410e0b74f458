import numpy as np
import pytest

from cogfactor import _kernels
from cogfactor._kernels import _fallback
from cogfactor.state_space import backward_sample, kalman_filter

from conftest import random_params

BACKENDS = _kernels.available_backends()


def batch_problem(rng, n=12, K=4, Q=2):
    p = random_params(rng, K, Q)
    J = rng.integers(1, 6, n)
    offsets = np.concatenate([[0], np.cumsum(J)]).astype(np.int64)
    deltas = np.concatenate([np.concatenate([[0.0], rng.uniform(0.5, 1.5, j - 1)]) for j in J])
    y = rng.normal(size=(offsets[-1], K))
    z = rng.standard_normal((offsets[-1], Q))
    return p, offsets, deltas, y, z


@pytest.mark.parametrize("backend", BACKENDS)
def test_ffbs_batch_matches_reference(backend, rng):
    mod = _kernels.get_backend(backend)
    p, offsets, deltas, y, z = batch_problem(rng)
    out = mod.ffbs_batch(y, offsets, deltas, p.G, p.sigma_eps, p.sigma_eta, p.m0, p.P0, z)
    for i in range(len(offsets) - 1):
        sl = slice(offsets[i], offsets[i + 1])
        f = kalman_filter((y[sl], deltas[sl]), p)
        np.testing.assert_allclose(out[sl], backward_sample(f, p, z[sl]), atol=1e-10)


def test_backends_agree(rng):
    if "cython" not in BACKENDS:
        pytest.skip("compiled kernels not built")
    p, offsets, deltas, y, z = batch_problem(rng, n=40)
    a = _kernels.get_backend("cython").ffbs_batch(y, offsets, deltas, p.G, p.sigma_eps, p.sigma_eta,
                                                  p.m0, p.P0, z)
    b = _fallback.ffbs_batch(y, offsets, deltas, p.G, p.sigma_eps, p.sigma_eta, p.m0, p.P0, z)
    np.testing.assert_allclose(a, b, atol=1e-12)

    t = np.sort(rng.integers(1, 30, 50)).astype(float)
    ev = rng.integers(0, 2, 50).astype(np.int8)
    X = rng.normal(size=(50, 3))
    beta = rng.normal(size=3) * 0.3
    ra = _kernels.get_backend("cython").cox_breslow(t, ev, X, beta)
    rb = _fallback.cox_breslow(t, ev, X, beta)
    assert ra[0] == pytest.approx(rb[0], abs=1e-10)
    np.testing.assert_allclose(ra[1], rb[1], atol=1e-10)
    np.testing.assert_allclose(ra[2], rb[2], atol=1e-10)


def breslow_direct(t, ev, X, beta):
    eta = X @ beta
    ll = 0.0
    for i in np.flatnonzero(ev):
        at_risk = t >= t[i]
        ll += eta[i] - np.log(np.exp(eta[at_risk]).sum())
    return ll


@pytest.mark.parametrize("backend", BACKENDS)
def test_cox_breslow_derivatives(backend, rng):
    mod = _kernels.get_backend(backend)
    t = np.sort(rng.integers(1, 15, 40)).astype(float)      # plenty of ties
    ev = rng.integers(0, 2, 40).astype(np.int8)
    X = rng.normal(size=(40, 2))
    beta = np.array([0.3, -0.2])
    ll, g, H = mod.cox_breslow(t, ev, X, beta)
    assert ll == pytest.approx(breslow_direct(t, ev, X, beta), abs=1e-10)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (breslow_direct(t, ev, X, beta + e) - breslow_direct(t, ev, X, beta - e)) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)
        gp = mod.cox_breslow(t, ev, X, beta + e)[1]
        gm = mod.cox_breslow(t, ev, X, beta - e)[1]
        np.testing.assert_allclose(H[:, j], (gp - gm) / (2 * h), rtol=1e-5, atol=1e-7)


def test_backend_selection():
    assert _kernels.BACKEND in BACKENDS
    assert _kernels.get_backend("numpy") is _fallback
    with pytest.raises(ValueError):
        _kernels.get_backend("fortran")


def test_kernel_error_on_bad_covariance(rng):
    p, offsets, deltas, y, z = batch_problem(rng, n=2, K=2, Q=1)
    with pytest.raises(_kernels.KernelError):
        _kernels.ffbs_batch(y, offsets, deltas, p.G, p.sigma_eps, p.sigma_eta, p.m0, -np.eye(1), z)
