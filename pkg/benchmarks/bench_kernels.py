"""Compare the compiled and numpy BART kernels.

Times the individual inner-loop kernels on synthetic inputs and a short
end-to-end fit with each backend, then checks that both backends produced
the same chain.

Usage::

    python3 benchmarks/bench_kernels.py [--rows 2208] [--sweeps 200] [--trees 50]
"""
import argparse
import time

import numpy as np

from bartmed.bart import BartConfig, _kernels_py, fit_bart, predict

try:
    from bartmed.bart import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def best_of(fn, repeat=5, number=20):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        times.append((time.perf_counter() - t0) / number)
    return min(times)


def kernel_table(n, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 100, (n, 6)).astype(np.int32)
    r = rng.normal(size=n)
    leaf_of = rng.integers(0, 8, n).astype(np.int32)
    values = rng.normal(size=8)
    leaves = np.arange(8, dtype=np.int32)
    z = rng.normal(size=8)
    rows = []
    for name, call in [
        ("grow_stats", lambda k: k.grow_stats(leaf_of, X, r, 3, 2, 50)),
        ("node_stats", lambda k: k.node_stats(leaf_of, r, 8)),
        ("add_leaf_values", lambda k: k.add_leaf_values(r.copy(), leaf_of, values, 1.0)),
        ("draw_leaves", lambda k: k.draw_leaves(leaf_of, r.copy(), values.copy(), leaves, 1.0, 0.01, z)),
        ("apply_grow", lambda k: k.apply_grow(leaf_of.copy(), X, 3, 2, 50, 8, 9)),
    ]:
        tp = best_of(lambda: call(_kernels_py))
        tc = best_of(lambda: call(_kernels_c)) if _kernels_c else float("nan")
        rows.append((name, tp, tc))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2208)
    ap.add_argument("--sweeps", type=int, default=200)
    ap.add_argument("--trees", type=int, default=50)
    args = ap.parse_args()

    print(f"kernel timings, n = {args.rows} (best of 5, microseconds per call)")
    print(f"{'kernel':<18}{'python':>12}{'cython':>12}{'speedup':>10}")
    for name, tp, tc in kernel_table(args.rows):
        print(f"{name:<18}{1e6 * tp:>12.1f}{1e6 * tc:>12.1f}{tp / tc:>10.1f}")

    rng = np.random.default_rng(1)
    Z = rng.uniform(size=(args.rows, 6))
    m = np.sin(6 * Z[:, 0]) + 0.5 * Z[:, 1] + rng.normal(0, 0.1, args.rows)
    cfg = BartConfig(n_trees=args.trees, burn_in=args.sweeps // 2, n_draws=args.sweeps - args.sweeps // 2, seed=3)
    fits = {}
    print(f"\nend-to-end fit: {args.trees} trees, {args.sweeps} sweeps, {args.rows} rows")
    for backend in ("python", "cython"):
        if backend == "cython" and _kernels_c is None:
            print("cython      not built")
            continue
        t0 = time.perf_counter()
        fits[backend] = fit_bart(Z, m, cfg, kernels=backend)
        print(f"{backend:<10}{time.perf_counter() - t0:>8.2f} s")
    if len(fits) == 2:
        same = np.array_equal(fits["python"].roots, fits["cython"].roots) and np.allclose(
            predict(fits["python"], Z), predict(fits["cython"], Z), atol=1e-10)
        print(f"chains identical: {same}")


if __name__ == "__main__":
    main()
