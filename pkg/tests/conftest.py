import time

import numpy as np
import pytest

from cogfactor.data_model import CognitiveTestId, Cohort, CohortSchema, SubjectSeries
from cogfactor.state_space import StateSpaceParams


def random_params(rng, K, Q, prior_var=None):
    """Random valid state-space parameters with unit-diagonal Sigma_eta."""
    G = rng.normal(0.0, 1.0, (K, Q))
    sigma_eps = rng.uniform(0.2, 1.5, K)
    A = rng.normal(size=(Q, Q))
    S = A @ A.T + Q * np.eye(Q)
    d = 1.0 / np.sqrt(np.diag(S))
    S = S * d[:, None] * d[None, :]
    np.fill_diagonal(S, 1.0)
    m0 = rng.normal(0.0, 0.5, Q)
    B = rng.normal(size=(Q, Q))
    P0 = B @ B.T + (prior_var or 1.0) * np.eye(Q)
    return StateSpaceParams(G, sigma_eps, S, m0, P0)


def random_instance(rng, J=None, K=None, Q=None):
    """(y, deltas, params) for a small random subject with J <= 4, Q <= 3, K <= 4."""
    Q = Q or int(rng.integers(1, 4))
    K = K or int(rng.integers(Q, 5))
    J = J or int(rng.integers(1, 5))
    params = random_params(rng, K, Q)
    deltas = np.concatenate([[0.0], rng.uniform(0.3, 2.0, J - 1)])
    y = rng.normal(0.0, 1.5, (J, K))
    return y, deltas, params


def tiny_schema(K=2, P=1, flips=None):
    flips = flips or [False] * K
    tests = tuple(CognitiveTestId(k, f"t{k}", flips[k]) for k in range(K))
    return CohortSchema(tests, tuple(f"c{p}" for p in range(P)))


def make_cohort(rng, n=20, K=2, P=1, J=(2, 4), schema=None):
    schema = schema or tiny_schema(K, P)
    subs = []
    for i in range(n):
        j = int(rng.integers(J[0], J[1] + 1))
        t = np.cumsum(rng.uniform(200, 500, j))
        t -= t[0]
        subs.append(SubjectSeries(f"s{i}", t, rng.normal(size=(j, schema.n_tests)),
                                  rng.normal(size=schema.n_covariates), bool(i % 3 == 0), t[-1] + 100.0))
    return Cohort(subs, schema)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def run_cli(*argv):
    from cogfactor.cli import main
    return main([str(a) for a in argv])


@pytest.fixture(scope="session")
def desk_pipeline(tmp_path_factory):
    """Desk-profile pipeline on the default synthetic cohort, run twice with one seed.

    Returns the two output directories; ``trial_seconds`` holds the wall-clock
    time of each run-trial step.
    """
    runs = DeskRuns()
    for name in ("first", "second"):
        out = tmp_path_factory.mktemp(f"desk_{name}")
        common = ("--seed", 2024, "--profile", "desk", "--out", out)
        for cmd in ("generate", "fit-factors", "fit-risk", "run-trial", "report"):
            t0 = time.perf_counter()
            assert run_cli(cmd, *common) == 0, cmd
            if cmd == "run-trial":
                runs.trial_seconds.append(time.perf_counter() - t0)
        runs.append(out)
    return runs


class DeskRuns(list):
    def __init__(self):
        super().__init__()
        self.trial_seconds = []


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
