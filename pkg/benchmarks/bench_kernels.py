"""Compare the compiled kernels against the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py``.
"""

import argparse
import timeit

import numpy as np

from manyiv import _kernels_py

try:
    from manyiv import _kernels
except ImportError:
    _kernels = None


def cases(rows):
    z = np.random.default_rng(0).standard_normal((rows, 2))
    yield "wald_exceed_count", lambda k: k.wald_exceed_count(z, 2.0, 0.9, 0.43588989, 1.0, 3.8415)
    grid = [(5.0, 0.0, 11.07), (300.0, 500.0, 885.4), (800.0, 5.0, 850.0)]
    yield "ncx2_cdf", lambda k: [k.ncx2_cdf(x, K, lam, 1e-14, 100000) for K, lam, x in grid]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=1 << 16)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    print(f"{'kernel':<20}{'backend':<10}{'best (ms)':>12}")
    for name, fn in cases(args.rows):
        best = {}
        for label, mod in backends.items():
            t = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
            best[label] = t
            print(f"{name:<20}{label:<10}{1e3 * t:>12.3f}")
        if len(best) == 2:
            print(f"{'':<20}{'speedup':<10}{best['python'] / best['cython']:>11.1f}x")


if __name__ == "__main__":
    main()
