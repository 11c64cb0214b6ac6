"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py
The numpy path is what you get with AESTHGAZE_DISABLE_NUMBA=1.
"""

import time

import numpy as np

from aesthgaze.accel import (
    HAVE_NUMBA,
    _pursuit_nb,
    _pursuit_np,
    _splat_points_nb,
    _splat_points_np,
    _transition_counts_nb,
    _transition_counts_np,
)


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_splat():
    rng = np.random.default_rng(0)
    h, w = 1080, 1920
    kernel = rng.random((219, 219))
    kernel /= kernel.sum()
    xs = rng.integers(0, w, 60).astype(np.int64)
    ys = rng.integers(0, h, 60).astype(np.int64)
    t_np = timeit(lambda: _splat_points_np(np.zeros((h, w)), xs, ys, kernel))
    t_nb = timeit(lambda: _splat_points_nb(np.zeros((h, w)), xs, ys, kernel))
    return "splat_points (60 pts, 219x219 kernel, 1080p)", t_np, t_nb


def bench_transitions():
    rng = np.random.default_rng(1)
    bins = rng.integers(0, 8, 100_000).astype(np.int64)
    t_np = timeit(lambda: _transition_counts_np(bins, 8))
    t_nb = timeit(lambda: _transition_counts_nb(bins, 8))
    return "transition_counts (100k samples, q=8)", t_np, t_nb


def bench_pursuit():
    rng = np.random.default_rng(2)
    targets = rng.random((100_000, 2)) * 1000
    noise = rng.normal(0, 10, (100_000, 2))
    start = np.array([500.0, 500.0])
    t_np = timeit(lambda: _pursuit_np(targets, 0.25, noise, start))
    t_nb = timeit(lambda: _pursuit_nb(targets, 0.25, noise, start))
    return "pursuit (100k steps)", t_np, t_nb


def main():
    if not HAVE_NUMBA:
        print("numba unavailable or disabled; the 'numba' column is the "
              "fallback running twice")
    rows = [bench_splat(), bench_transitions(), bench_pursuit()]
    print(f"{'kernel':<45} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<45} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
