"""Hot numeric kernels, each with a numpy path and a numba loop path.

The public names at the bottom of this module are bound once at import to
either the ``*_nb`` or the ``*_np`` variant (see :mod:`tracegraph._accel`).
Both variants stay importable so they can be cross-checked and benchmarked.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# scatter-add of rows


def scatter_add_rows_np(index, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
    np.add.at(out, index, values)
    return out


@njit
def scatter_add_rows_nb(index, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
    for k in range(index.shape[0]):
        r = index[k]
        for c in range(values.shape[1]):
            out[r, c] += values[k, c]
    return out


# ---------------------------------------------------------------------------
# per-group latency statistics: count, mean, nearest-rank p95


def _p95_rank(n):
    # ceil(0.95 * n) in integer arithmetic, 1-based
    return (95 * n + 99) // 100


def group_latency_stats_np(codes, durations, n_groups):
    counts = np.bincount(codes, minlength=n_groups).astype(np.float64)
    sums = np.zeros(n_groups, dtype=np.float64)
    np.add.at(sums, codes, durations.astype(np.float64))
    means = np.divide(sums, counts, out=np.zeros(n_groups), where=counts > 0)
    order = np.lexsort((durations, codes))
    sorted_d = durations[order].astype(np.float64)
    starts = np.concatenate(([0], np.cumsum(counts.astype(np.int64))[:-1]))
    p95 = np.zeros(n_groups, dtype=np.float64)
    for g in np.flatnonzero(counts > 0):
        n = int(counts[g])
        p95[g] = sorted_d[starts[g] + _p95_rank(n) - 1]
    return counts, means, p95


@njit
def group_latency_stats_nb(codes, durations, n_groups):
    counts = np.zeros(n_groups, dtype=np.float64)
    sums = np.zeros(n_groups, dtype=np.float64)
    for k in range(codes.shape[0]):
        counts[codes[k]] += 1.0
        sums[codes[k]] += float(durations[k])
    means = np.zeros(n_groups, dtype=np.float64)
    p95 = np.zeros(n_groups, dtype=np.float64)
    order = np.argsort(codes, kind="mergesort")
    start = 0
    for g in range(n_groups):
        n = int(counts[g])
        if n == 0:
            continue
        means[g] = sums[g] / counts[g]
        block = np.empty(n, dtype=np.float64)
        for k in range(n):
            block[k] = float(durations[order[start + k]])
        block.sort()
        p95[g] = block[(95 * n + 99) // 100 - 1]
        start += n
    return counts, means, p95


# ---------------------------------------------------------------------------
# row-wise layer normalisation


def layer_norm_forward_np(x, gain, bias, var_floor):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    floored = var < var_floor
    inv_std = 1.0 / np.sqrt(np.where(floored, var_floor, var))
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0], floored[:, 0]


@njit
def layer_norm_forward_nb(x, gain, bias, var_floor):
    n, m = x.shape
    y = np.empty((n, m))
    xhat = np.empty((n, m))
    inv_std = np.empty(n)
    floored = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        if var < var_floor:
            var = var_floor
            floored[i] = True
        s = 1.0 / np.sqrt(var)
        inv_std[i] = s
        for j in range(m):
            xhat[i, j] = (x[i, j] - mu) * s
            y[i, j] = xhat[i, j] * gain[0, j] + bias[0, j]
    return y, xhat, inv_std, floored


def layer_norm_backward_np(dy, xhat, inv_std, floored, gain):
    dgain = (dy * xhat).sum(axis=0, keepdims=True)
    dbias = dy.sum(axis=0, keepdims=True)
    g = dy * gain
    g_mean = g.mean(axis=1, keepdims=True)
    gx_mean = (g * xhat).mean(axis=1, keepdims=True)
    # a floored variance is a constant, so the xhat term drops out
    gx_mean = np.where(floored[:, None], 0.0, gx_mean)
    dx = inv_std[:, None] * (g - g_mean - xhat * gx_mean)
    return dx, dgain, dbias


@njit
def layer_norm_backward_nb(dy, xhat, inv_std, floored, gain):
    n, m = dy.shape
    dx = np.empty((n, m))
    dgain = np.zeros((1, m))
    dbias = np.zeros((1, m))
    g = np.empty(m)
    for i in range(n):
        g_mean = 0.0
        gx_mean = 0.0
        for j in range(m):
            dgain[0, j] += dy[i, j] * xhat[i, j]
            dbias[0, j] += dy[i, j]
            g[j] = dy[i, j] * gain[0, j]
            g_mean += g[j]
            gx_mean += g[j] * xhat[i, j]
        g_mean /= m
        gx_mean /= m
        if floored[i]:
            gx_mean = 0.0
        for j in range(m):
            dx[i, j] = inv_std[i] * (g[j] - g_mean - xhat[i, j] * gx_mean)
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# average ranks with ties (1-based)


def average_ranks_np(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(n, dtype=np.float64)
    if n == 0:
        return ranks
    boundaries = np.flatnonzero(np.diff(xs) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    avg = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


@njit
def average_ranks_nb(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    scatter_add_rows = scatter_add_rows_nb
    group_latency_stats = group_latency_stats_nb
    layer_norm_forward = layer_norm_forward_nb
    layer_norm_backward = layer_norm_backward_nb
    average_ranks = average_ranks_nb
else:
    scatter_add_rows = scatter_add_rows_np
    group_latency_stats = group_latency_stats_np
    layer_norm_forward = layer_norm_forward_np
    layer_norm_backward = layer_norm_backward_np
    average_ranks = average_ranks_np
