"""Hot elementwise / reduction kernels with a numba and a numpy path.

Each public function dispatches on :data:`oodkit._accel.HAS_NUMBA`. The
``*_np`` variants are always importable so tests and the benchmark can run
both paths side by side in one process.
"""

from __future__ import annotations

import numpy as np

from ._accel import HAS_NUMBA, njit

__all__ = [
    "swish_fwd",
    "swish_bwd",
    "pooled_sq_err",
    "mann_whitney_u",
    "hard_shrink",
    "USING_NUMBA",
]

USING_NUMBA = HAS_NUMBA
# numpy's vectorized float32 exp beats the jitted scalar loop for swish (see
# benchmarks/bench_kernels.py), so swish stays on numpy even with numba on
SWISH_NUMBA = False


# --- numpy reference path -------------------------------------------------


def _sigmoid_np(x):
    # exp overflows to inf for very negative x, which correctly gives sig = 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def swish_fwd_np(x):
    sig = _sigmoid_np(x)
    return x * sig


def swish_bwd_np(x, upstream):
    sig = _sigmoid_np(x)
    return upstream * (sig + x * sig * (1.0 - sig))


def pooled_sq_err_np(a, b, scale):
    """Per-image mean of (pool(a) - pool(b))**2 with ``scale x scale`` mean pooling."""
    n, h, w = a.shape
    d = (a.astype(np.float64) - b.astype(np.float64)).reshape(n, h // scale, scale, w // scale, scale)
    # pooling is linear, so pool(a) - pool(b) == pool(a - b)
    pooled = d.mean(axis=(2, 4))
    return (pooled * pooled).mean(axis=(1, 2))


def mann_whitney_u_np(in_scores, ood_scores):
    """Number of (in, ood) pairs with ood > in, ties counted 1/2."""
    x = np.asarray(in_scores, dtype=np.float64)
    y = np.asarray(ood_scores, dtype=np.float64)
    allv = np.concatenate([x, y])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    # average ranks over tie groups
    _, first, counts = np.unique(sorted_v, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0
    ranks_sorted = np.repeat(avg, counts)
    ranks = np.empty_like(ranks_sorted)
    ranks[order] = ranks_sorted
    m = y.size
    return float(ranks[x.size:].sum() - m * (m + 1) / 2.0)


def hard_shrink_np(w, lam, eps):
    """Hard-shrink attention rows, renormalize, fall back to ``w`` where a row empties.

    Returns ``(w_hat, fallback)`` with ``fallback`` a bool per row.
    """
    w = np.asarray(w, dtype=np.float64)
    shrunk = np.maximum(w - lam, 0.0) * w / (np.abs(w - lam) + eps)
    tot = shrunk.sum(axis=-1, keepdims=True)
    fallback = tot[..., 0] <= 0.0
    safe = np.where(tot > 0.0, tot, 1.0)
    out = np.where(fallback[..., None], w, shrunk / safe)
    return out, fallback


# --- numba path -----------------------------------------------------------


@njit(cache=True)
def _swish_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = v / (1.0 + np.exp(-v))
    return out.reshape(x.shape)


@njit(cache=True)
def _swish_bwd_nb(x, upstream):
    xf = x.ravel()
    uf = upstream.ravel()
    out = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        s = 1.0 / (1.0 + np.exp(-v))
        out[i] = uf[i] * (s + v * s * (1.0 - s))
    return out.reshape(x.shape)


@njit(cache=True)
def _pooled_sq_err_nb(a, b, scale):
    n, h, w = a.shape
    hh = h // scale
    ww = w // scale
    inv = 1.0 / (scale * scale)
    out = np.zeros(n, dtype=np.float64)
    for k in range(n):
        acc = 0.0
        for i in range(hh):
            for j in range(ww):
                s = 0.0
                for di in range(scale):
                    for dj in range(scale):
                        r = i * scale + di
                        c = j * scale + dj
                        s += np.float64(a[k, r, c]) - np.float64(b[k, r, c])
                s *= inv
                acc += s * s
        out[k] = acc / (hh * ww)
    return out


@njit(cache=True)
def _mann_whitney_u_nb(x, y):
    xs = np.sort(x)
    ys = np.sort(y)
    n = xs.size
    lo = 0
    hi = 0
    total = 0.0
    for j in range(ys.size):
        v = ys[j]
        while lo < n and xs[lo] < v:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < n and xs[hi] <= v:
            hi += 1
        total += lo + 0.5 * (hi - lo)
    return total


@njit(cache=True)
def _hard_shrink_nb(w, lam, eps):
    rows, m = w.shape
    out = np.empty_like(w)
    fallback = np.zeros(rows, dtype=np.bool_)
    for r in range(rows):
        tot = 0.0
        for i in range(m):
            d = w[r, i] - lam
            v = max(d, 0.0) * w[r, i] / (abs(d) + eps)
            out[r, i] = v
            tot += v
        if tot > 0.0:
            for i in range(m):
                out[r, i] /= tot
        else:
            fallback[r] = True
            for i in range(m):
                out[r, i] = w[r, i]
    return out, fallback


# --- dispatch -------------------------------------------------------------


def swish_fwd(x):
    if USING_NUMBA and SWISH_NUMBA:
        return _swish_fwd_nb(np.ascontiguousarray(x))
    return swish_fwd_np(x)


def swish_bwd(x, upstream):
    if USING_NUMBA and SWISH_NUMBA:
        return _swish_bwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(upstream, dtype=x.dtype))
    return swish_bwd_np(x, upstream)


def pooled_sq_err(a, b, scale):
    if USING_NUMBA:
        return _pooled_sq_err_nb(np.ascontiguousarray(a), np.ascontiguousarray(b), int(scale))
    return pooled_sq_err_np(a, b, scale)


def mann_whitney_u(in_scores, ood_scores):
    x = np.asarray(in_scores, dtype=np.float64)
    y = np.asarray(ood_scores, dtype=np.float64)
    if USING_NUMBA:
        return float(_mann_whitney_u_nb(x, y))
    return mann_whitney_u_np(x, y)


def hard_shrink(w, lam, eps=1e-12):
    w = np.asarray(w, dtype=np.float64)
    if USING_NUMBA:
        flat = np.ascontiguousarray(w.reshape(-1, w.shape[-1]))
        out, fb = _hard_shrink_nb(flat, float(lam), float(eps))
        return out.reshape(w.shape), fb.reshape(w.shape[:-1])
    return hard_shrink_np(w, lam, eps)
