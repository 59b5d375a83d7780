"""Hot numeric kernels with numba-compiled and pure-numpy variants.

The compiled path is the default. Set EVADAPT_NO_NUMBA=1 to force the
pure-numpy fallback (useful for debugging and for the benchmark in
benchmarks/bench_kernels.py). Both variants are exact: they must produce
bit-identical results on the same inputs.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("EVADAPT_NO_NUMBA", "0") != "1"

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

__all__ = [
    "USE_NUMBA",
    "voxelize_counts",
    "pairwise_mask_overlap",
    "label_components",
    "threshold_crossings",
]


# --- voxelization ---------------------------------------------------------

def _voxelize_counts_np(ts, xs, ys, ps, t_start, t_end, H, W, B, signed):
    grid = np.zeros((H, W, B), dtype=np.float64)
    span = float(t_end - t_start)
    for i in range(ts.shape[0]):
        t = ts[i]
        if t < t_start or t > t_end:
            continue
        b = int(B * (t - t_start) / span)
        if b >= B:
            b = B - 1
        grid[ys[i], xs[i], b] += ps[i] if signed else 1.0
    return grid


# --- instance-mask overlap ------------------------------------------------

def _pairwise_mask_overlap_np(gt, pred):
    # gt: (G, H*W) uint8, pred: (P, H*W) uint8 -> inter (G,P), areas
    G, n = gt.shape
    P = pred.shape[0]
    inter = np.zeros((G, P), dtype=np.int64)
    for g in range(G):
        for p in range(P):
            s = 0
            for j in range(n):
                if gt[g, j] != 0 and pred[p, j] != 0:
                    s += 1
            inter[g, p] = s
    return inter


# --- connected components (4-connectivity, row-major scan + flood fill) ---

def _label_components_np(mask):
    H, W = mask.shape
    labels = np.zeros((H, W), dtype=np.int64)
    stack = np.empty(H * W, dtype=np.int64)
    current = 0
    for y0 in range(H):
        for x0 in range(W):
            if mask[y0, x0] == 0 or labels[y0, x0] != 0:
                continue
            current += 1
            top = 0
            stack[top] = y0 * W + x0
            top += 1
            labels[y0, x0] = current
            while top > 0:
                top -= 1
                idx = stack[top]
                y = idx // W
                x = idx - y * W
                if y > 0 and mask[y - 1, x] != 0 and labels[y - 1, x] == 0:
                    labels[y - 1, x] = current
                    stack[top] = (y - 1) * W + x
                    top += 1
                if y < H - 1 and mask[y + 1, x] != 0 and labels[y + 1, x] == 0:
                    labels[y + 1, x] = current
                    stack[top] = (y + 1) * W + x
                    top += 1
                if x > 0 and mask[y, x - 1] != 0 and labels[y, x - 1] == 0:
                    labels[y, x - 1] = current
                    stack[top] = y * W + x - 1
                    top += 1
                if x < W - 1 and mask[y, x + 1] != 0 and labels[y, x + 1] == 0:
                    labels[y, x + 1] = current
                    stack[top] = y * W + x + 1
                    top += 1
    return labels, current


# --- event simulation: per-pixel log-intensity threshold crossings --------

def _threshold_crossings_np(logI, step_ms, theta, out_t, out_x, out_y, out_p):
    # logI: (T, H, W) log-intensity sampled every step_ms milliseconds.
    # Emits events whenever |logI - ref| >= theta, with linear interpolation
    # of the crossing time inside the step. Returns the number of events.
    T, H, W = logI.shape
    count = 0
    cap = out_t.shape[0]
    for y in range(H):
        for x in range(W):
            ref = logI[0, y, x]
            for k in range(1, T):
                prev = logI[k - 1, y, x]
                cur = logI[k, y, x]
                # emit as many threshold crossings as fit in this step
                while count < cap:
                    diff = cur - ref
                    if diff >= theta:
                        pol = 1
                    elif diff <= -theta:
                        pol = -1
                    else:
                        break
                    target = ref + (theta if pol == 1 else -theta)
                    if cur != prev:
                        frac = (target - prev) / (cur - prev)
                    else:
                        frac = 1.0
                    if frac < 0.0:
                        frac = 0.0
                    elif frac > 1.0:
                        frac = 1.0
                    t_us = int(((k - 1) + frac) * step_ms * 1000.0)
                    out_t[count] = t_us
                    out_x[count] = x
                    out_y[count] = y
                    out_p[count] = pol
                    count += 1
                    ref = target
    return count


if USE_NUMBA:
    voxelize_counts = njit(cache=True)(_voxelize_counts_np)
    pairwise_mask_overlap = njit(cache=True)(_pairwise_mask_overlap_np)
    label_components = njit(cache=True)(_label_components_np)
    threshold_crossings = njit(cache=True)(_threshold_crossings_np)
else:
    voxelize_counts = _voxelize_counts_np
    pairwise_mask_overlap = _pairwise_mask_overlap_np
    label_components = _label_components_np
    threshold_crossings = _threshold_crossings_np
