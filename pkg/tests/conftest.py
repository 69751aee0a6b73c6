"""Shared brute-force reference implementations used as test oracles.

These stay deliberately loop-based and independent of the library code paths
they check.
"""

import numpy as np


def brute_scatter_mean(feats, cells, m):
    n, d = feats.shape
    out = np.zeros((m, d))
    counts = np.zeros(m)
    for i in range(n):
        if cells[i] >= 0:
            out[cells[i]] += feats[i]
            counts[cells[i]] += 1
    for j in range(m):
        if counts[j]:
            out[j] /= counts[j]
    return out


def brute_bilinear(grid, coords):
    d, h, w = grid.shape
    n = coords.shape[0]
    out = np.zeros((n, d))
    for i in range(n):
        x = min(max(coords[i, 0], 0.0), w - 1.0)
        y = min(max(coords[i, 1], 0.0), h - 1.0)
        x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
        y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
        fx, fy = x - x0, y - y0
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        out[i] = (
            grid[:, y0, x0] * (1 - fx) * (1 - fy)
            + grid[:, y0, x1] * fx * (1 - fy)
            + grid[:, y1, x0] * (1 - fx) * fy
            + grid[:, y1, x1] * fx * fy
        )
    return out


def brute_mosaic(patches, w, nrows, ncols):
    """Per-cell weighted average of overlapping patches, then rectification."""
    s = w.shape[0]
    num = np.zeros((nrows, ncols))
    den = np.zeros((nrows, ncols))
    for row0, col0, vals in patches:
        for i in range(s):
            for j in range(s):
                num[row0 + i, col0 + j] += w[i, j] * vals[i, j]
                den[row0 + i, col0 + j] += w[i, j]
    return np.maximum(num / den, 0.0)
