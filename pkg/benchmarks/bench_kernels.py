"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]

Prints best-of-repeat wall time per kernel and backend, the speedup, and
whether the two backends returned identical results.
"""

import argparse
import timeit

import numpy as np

from mvem import _fallback

try:
    from mvem import _core
except ImportError:  # extension not built
    _core = None


def cases(quick):
    rng = np.random.default_rng(0)
    P, n = (2000, 500) if quick else (10_000, 1000)
    R, N, m = (20, 100, 500) if quick else (50, 200, 1000)
    k = 200 if quick else 800
    dW = rng.normal(scale=0.1, size=(P, n))
    x0 = rng.normal(size=P)
    law = rng.normal(size=n)
    dWi = rng.normal(scale=0.1, size=(R, N, m))
    x0i = rng.normal(size=(R, N))
    cost = rng.random((k, k))
    return [
        (f"affine_paths P={P} n={n}", "affine_paths", (dW, x0, law, 0.01, 1.2, 0.4, 1.0, 1)),
        (f"affine_interacting R={R} N={N} n={m}", "affine_interacting", (dWi, x0i, 0.01, 1.2, 0.4, 1.0, 1)),
        (f"lsap n={k}", "lsap", (cost,)),
    ]


def same(name, a, b, args):
    a, b = np.asarray(a), np.asarray(b)
    if name != "lsap":
        return np.array_equal(a, b)
    cost = args[0]
    idx = np.arange(cost.shape[0])
    return abs(cost[idx, a].sum() - cost[idx, b].sum()) < 1e-9


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = parser.parse_args()
    if _core is None:
        print("compiled extension not available; only the fallback can run")
    print(f"{'kernel':<40} {'cython s':>10} {'numpy s':>10} {'speedup':>8}  identical")
    for label, name, fargs in cases(args.quick):
        slow_fn = getattr(_fallback, name)
        t_slow = min(timeit.repeat(lambda: slow_fn(*fargs), number=1, repeat=args.repeat))
        if _core is None:
            print(f"{label:<40} {'-':>10} {t_slow:>10.4f} {'-':>8}  -")
            continue
        fast_fn = getattr(_core, name)
        t_fast = min(timeit.repeat(lambda: fast_fn(*fargs), number=1, repeat=args.repeat))
        ok = same(name, fast_fn(*fargs), slow_fn(*fargs), fargs)
        print(f"{label:<40} {t_fast:>10.4f} {t_slow:>10.4f} {t_slow / t_fast:>7.1f}x  {ok}")


if __name__ == "__main__":
    main()
