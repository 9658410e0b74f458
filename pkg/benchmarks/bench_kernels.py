"""Compiled vs numpy kernel timings on pipeline-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

ffbs_batch: one Gibbs sweep over 1,000 subjects (K=10 tests, Q=4 factors,
2-8 visits each).  cox_breslow: one Newton evaluation on 1,000 enrollees
with the treatment indicator and three adjusters.
"""
import argparse
import timeit

import numpy as np

from cogfactor import _kernels


def ffbs_inputs(rng, n=1000, K=10, Q=4):
    G = rng.uniform(0.5, 1.2, (K, Q)) * (rng.random((K, Q)) < 0.3)
    G[np.arange(K), np.arange(K) % Q] = 0.8
    sigma_eps = np.full(K, 0.3)
    sigma_eta = 0.3 * np.ones((Q, Q)) + 0.7 * np.eye(Q)
    J = rng.integers(2, 9, n)
    offsets = np.concatenate([[0], np.cumsum(J)]).astype(np.int64)
    deltas = np.concatenate([np.concatenate([[0.0], rng.uniform(0.7, 1.4, j - 1)]) for j in J])
    y = rng.normal(size=(offsets[-1], K))
    z = rng.standard_normal((offsets[-1], Q))
    return y, offsets, deltas, G, sigma_eps, sigma_eta, np.zeros(Q), 10.0 * np.eye(Q), z


def cox_inputs(rng, n=1000):
    time = np.sort(rng.integers(1, 1279, n)).astype(float)
    event = (rng.random(n) < 0.08).astype(np.int8)
    X = np.column_stack([rng.random(n) < 0.5, rng.random(n) < 0.3, rng.normal(16, 3, n), rng.random(n) < 0.45])
    X = X.astype(float) - X.mean(axis=0)
    return time, event, X, np.array([-0.2, 0.1, 0.02, 0.0])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = {"ffbs_batch": ffbs_inputs(rng), "cox_breslow": cox_inputs(rng)}
    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<14}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speedup':>10}")
    for name, inputs in cases.items():
        best = {}
        for b in backends:
            fn = getattr(_kernels.get_backend(b), name)
            number = 3 if name == "ffbs_batch" else 200
            best[b] = min(timeit.repeat(lambda: fn(*inputs), number=number, repeat=args.repeat)) / number * 1e3
        speed = f"{best['numpy'] / best['cython']:>9.1f}x" if "cython" in best else f"{'':>10}"
        print(f"{name:<14}" + "".join(f"{best[b]:>14.3f}" for b in backends) + speed)


if __name__ == "__main__":
    main()
