"""Numba vs pure-numpy timings for the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both twins are called directly, so one process compares them regardless of
MOLBO_DISABLE_NUMBA. The first numba call (compile or cache load) is
excluded from the timings.
"""

import argparse
import time

import numpy as np

from molbo import kernels


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    fp_small = rng.integers(0, 2**63, (200, 16), dtype=np.uint64)
    fp_large = rng.integers(0, 2**63, (1000, 16), dtype=np.uint64)
    dense = rng.normal(size=(400, 8))

    widths = np.array([8, 50, 50, 1], dtype=np.int64)
    n = 30
    X = rng.normal(size=(n, 8))
    Y = rng.normal(size=(n, 1))
    P = int(sum(widths[l + 1] * (widths[l] + 1) for l in range(3)))
    theta = rng.normal(0, 0.1, P)
    perms = np.stack([rng.permutation(n) for _ in range(500)])
    adam_args = (theta, widths, 0, True, X, Y, perms, 20, 1e-3, 1.0, 5e-4 / 30, 0.9, 0.999, 1e-8)

    return [
        ("tanimoto_gram 200x200x1024b", kernels._tanimoto_gram_numba, kernels._tanimoto_gram_numpy,
         (fp_small, fp_small)),
        ("tanimoto_gram 1000x1000x1024b", kernels._tanimoto_gram_numba, kernels._tanimoto_gram_numpy,
         (fp_large, fp_large)),
        ("sqdist 400x400x8", kernels._sqdist_numba, kernels._sqdist_numpy, (dense, dense)),
        ("mlp_adam 8-50-50-1, n=30, 500 epochs", kernels._mlp_adam_numba,
         kernels._mlp_adam_numpy, adam_args),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fast, slow, call_args in cases(rng):
        out_fast = fast(*call_args)
        out_slow = slow(*call_args)
        a = out_fast[0] if isinstance(out_fast, tuple) else out_fast
        b = out_slow[0] if isinstance(out_slow, tuple) else out_slow
        diff = float(np.max(np.abs(a - b)))
        t_fast = _time(lambda: fast(*call_args), args.repeat)
        t_slow = _time(lambda: slow(*call_args), args.repeat)
        print(f"{name:40s} {t_fast * 1e3:10.2f} {t_slow * 1e3:10.2f} "
              f"{t_slow / t_fast:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
