"""Time the numba kernels against the numpy/scipy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 64,256,1024]

Each kernel is called once before timing so numba compilation is excluded.
Results are checked for agreement before they are reported.
"""
import argparse
import timeit

import numpy as np

from popmech.kernels import numba_impl, numpy_impl


def _cases(n, rng):
    C = rng.random((n, n)) * 4
    h = rng.normal(size=n)
    X, V = rng.normal(size=(n, 2)) * 3, rng.normal(size=(n, 2))
    boids = (0.3, 1.0, 0.1, 0.3, 0.005, 0.5, 5.0)
    return {
        "softmin": (lambda k: k.softmin(C, h, 0.05)),
        "assignment": (lambda k: k.assignment(C)),
        "boids_accel": (lambda k: k.boids_accel(X, V, *boids)),
    }


def _agree(name, a, b, C):
    if name == "assignment":
        rows = np.arange(len(a))
        return abs(C[rows, a].sum() - C[rows, b].sum()) <= 1e-9
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", default="64,256,1024")
    args = ap.parse_args()
    if numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<12} {'n':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        rng = np.random.default_rng(n)
        cases = _cases(n, rng)
        C = rng.random((n, n))
        for name, call in cases.items():
            if name == "assignment":
                call = (lambda k, C=C: k.assignment(C))
            ref, fast = call(numpy_impl), call(numba_impl)  # warm-up and compile
            if not _agree(name, ref, fast, C):
                raise SystemExit(f"{name} n={n}: backends disagree")
            number = max(1, int(2000 // n))
            t_np = min(timeit.repeat(lambda: call(numpy_impl), number=number, repeat=args.repeat)) / number
            t_nb = min(timeit.repeat(lambda: call(numba_impl), number=number, repeat=args.repeat)) / number
            print(f"{name:<12} {n:>6} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
