"""Numba-accelerated inner loops with pure-numpy fallbacks.

Set AESTHGAZE_DISABLE_NUMBA=1 to force the numpy path (also respected when
numba is missing). benchmarks/bench_kernels.py compares both implementations.
"""

import os

import numpy as np

_disabled = os.environ.get("AESTHGAZE_DISABLE_NUMBA", "0") not in ("0", "")
try:
    if _disabled:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


USING_NUMBA = HAVE_NUMBA and not _disabled


# ---------------------------------------------------------------------------
# Gaussian splatting for attention maps

def _splat_points_np(acc, xs, ys, kernel):
    r = kernel.shape[0] // 2
    h, w = acc.shape
    for x, y in zip(xs, ys):
        y0, y1 = y - r, y + r + 1
        x0, x1 = x - r, x + r + 1
        ky0 = max(0, -y0); kx0 = max(0, -x0)
        y0 = max(0, y0); x0 = max(0, x0)
        y1c = min(h, y1); x1c = min(w, x1)
        if y1c <= y0 or x1c <= x0:
            continue
        acc[y0:y1c, x0:x1c] += kernel[ky0:ky0 + (y1c - y0), kx0:kx0 + (x1c - x0)]
    return acc


@njit(cache=True)
def _splat_points_nb(acc, xs, ys, kernel):  # pragma: no cover - jit
    r = kernel.shape[0] // 2
    h, w = acc.shape
    for i in range(xs.shape[0]):
        x = xs[i]
        y = ys[i]
        for dy in range(-r, r + 1):
            yy = y + dy
            if yy < 0 or yy >= h:
                continue
            for dx in range(-r, r + 1):
                xx = x + dx
                if xx < 0 or xx >= w:
                    continue
                acc[yy, xx] += kernel[dy + r, dx + r]
    return acc


def splat_points(acc, xs, ys, kernel):
    """Add ``kernel`` centered at each (x, y) into ``acc`` with edge clipping."""
    xs = np.ascontiguousarray(xs, dtype=np.int64)
    ys = np.ascontiguousarray(ys, dtype=np.int64)
    if USING_NUMBA:
        return _splat_points_nb(acc, xs, ys, kernel)
    return _splat_points_np(acc, xs, ys, kernel)


# ---------------------------------------------------------------------------
# First-order transition counting for the Markov transition field

def _transition_counts_np(bins, q):
    counts = np.zeros((q, q), dtype=np.float64)
    np.add.at(counts, (bins[:-1], bins[1:]), 1.0)
    return counts


@njit(cache=True)
def _transition_counts_nb(bins, q):  # pragma: no cover - jit
    counts = np.zeros((q, q), dtype=np.float64)
    for i in range(bins.shape[0] - 1):
        counts[bins[i], bins[i + 1]] += 1.0
    return counts


def transition_counts(bins, q):
    bins = np.ascontiguousarray(bins, dtype=np.int64)
    if USING_NUMBA:
        return _transition_counts_nb(bins, q)
    return _transition_counts_np(bins, q)


# ---------------------------------------------------------------------------
# Noisy pursuit integration for the synthetic gaze simulator

def _pursuit_np(targets, gain, noise, start):
    n = targets.shape[0]
    out = np.empty_like(targets)
    g = start.copy()
    for i in range(n):
        g = g + gain * (targets[i] - g) + noise[i]
        out[i] = g
    return out


@njit(cache=True)
def _pursuit_nb(targets, gain, noise, start):  # pragma: no cover - jit
    n = targets.shape[0]
    out = np.empty_like(targets)
    gx = start[0]
    gy = start[1]
    for i in range(n):
        gx = gx + gain * (targets[i, 0] - gx) + noise[i, 0]
        gy = gy + gain * (targets[i, 1] - gy) + noise[i, 1]
        out[i, 0] = gx
        out[i, 1] = gy
    return out


def pursuit(targets, gain, noise, start):
    """Integrate first-order pursuit of a target track with additive noise."""
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    start = np.ascontiguousarray(start, dtype=np.float64)
    if USING_NUMBA:
        return _pursuit_nb(targets, gain, noise, start)
    return _pursuit_np(targets, gain, noise, start)
