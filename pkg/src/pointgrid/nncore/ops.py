"""Forward + backward rules for the fixed op set.

Grid activations are (C, H, W); point features are (N, d).  Convolutions use
an im2col buffer built in channel-last order (the GEMM-friendly layout on
low-bandwidth machines) and keep it alive for the backward pass.

Scatter reductions accumulate in a deterministic order: rows are stably sorted
by destination cell, so within a cell the summation order equals the input row
order.  Callers that need bit-exact permutation invariance sort their points
canonically once up front.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .tensor import ShapeMismatch, Tensor

#: Cell id marking a point outside the grid; such rows are ignored by scatter.
OUTSIDE = -1


def _segment_sum(values: np.ndarray, ids: np.ndarray, m: int) -> np.ndarray:
    """Sum rows of ``values`` into ``m`` bins given by ``ids`` (all >= 0).

    Implemented as a sparse selection-matrix product: rows are visited in
    bin-major order with ties in input order, so the reduction order is a pure
    function of (values, ids) and results are bit-reproducible.
    """
    n = len(ids)
    if n == 0:
        return np.zeros((m, values.shape[1]), dtype=values.dtype)
    order = np.argsort(ids, kind="stable")
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(ids, minlength=m), out=indptr[1:])
    sel = sp.csr_matrix(
        (np.ones(n, dtype=values.dtype), order, indptr), shape=(m, n), copy=False
    )
    return np.asarray(sel @ values)


# ---------------------------------------------------------------------------
# Pointwise / dense ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x [*, in] @ W [in, out] + b [out]."""
    if x.data.shape[-1] != W.data.shape[0] or W.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, W.data.shape[0])
    out = x2 @ W.data + b.data

    def backward(g):
        g2 = g.reshape(-1, W.data.shape[1])
        if x.requires_grad:
            x._accum((g2 @ W.data.T).reshape(x.data.shape))
        if W.requires_grad:
            W._accum(x2.T @ g2)
        if b.requires_grad:
            b._accum(g2.sum(axis=0))

    return Tensor._result(out.reshape(*lead, W.data.shape[1]), (x, W, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        if x.requires_grad:
            x._accum(np.where(mask, g, g.dtype.type(0)))

    return Tensor._result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (s * (1 - s)))

    return Tensor._result(s, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return Tensor._result(out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    out = x.data * x.data.dtype.type(s)

    def backward(g):
        if x.requires_grad:
            x._accum(g * g.dtype.type(s))

    return Tensor._result(out, (x,), backward)


def concat(xs: list[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._result(out, tuple(xs), backward)


# ---------------------------------------------------------------------------
# Grid ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Same-padding stride-1 convolution; x (Cin, H, W), kernels (Cout, Cin, k, k)."""
    cin, h, w = x.data.shape
    cout, cin_w, kh, kw = W.data.shape
    if cin_w != cin or kh != kw or kh % 2 == 0 or b.data.shape != (cout,):
        raise ShapeMismatch(f"conv2d: x{x.shape} W{W.shape} b{b.shape}")
    k = kh

    if k == 1:
        wm = W.data.reshape(cout, cin)
        x2 = x.data.reshape(cin, h * w)
        out = (wm @ x2 + b.data[:, None]).reshape(cout, h, w)

        def backward1(g):
            g2 = g.reshape(cout, h * w)
            if x.requires_grad:
                x._accum((wm.T @ g2).reshape(cin, h, w))
            if W.requires_grad:
                W._accum((g2 @ x2.T).reshape(cout, cin, 1, 1))
            if b.requires_grad:
                b._accum(g2.sum(axis=1))

        return Tensor._result(out, (x, W, b), backward1)

    p = k // 2
    xl = np.zeros((h + 2 * p, w + 2 * p, cin), dtype=x.data.dtype)
    xl[p : p + h, p : p + w, :] = x.data.transpose(1, 2, 0)
    col = np.empty((h * w, k * k * cin), dtype=x.data.dtype)
    for i, (dy, dx) in enumerate((dy, dx) for dy in range(k) for dx in range(k)):
        col[:, i * cin : (i + 1) * cin] = xl[dy : dy + h, dx : dx + w, :].reshape(h * w, cin)
    wm = W.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out2 = col @ wm + b.data
    out = np.ascontiguousarray(out2.reshape(h, w, cout).transpose(2, 0, 1))

    def backward(g):
        gof = np.ascontiguousarray(g.transpose(1, 2, 0)).reshape(h * w, cout)
        if b.requires_grad:
            b._accum(gof.sum(axis=0))
        if W.requires_grad:
            dwm = col.T @ gof
            W._accum(dwm.reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
        if x.requires_grad:
            dcol = gof @ wm.T
            dxl = np.zeros_like(xl)
            for i, (dy, dx) in enumerate((dy, dx) for dy in range(k) for dx in range(k)):
                dxl[dy : dy + h, dx : dx + w, :] += dcol[:, i * cin : (i + 1) * cin].reshape(
                    h, w, cin
                )
            x._accum(np.ascontiguousarray(dxl[p : p + h, p : p + w, :].transpose(2, 0, 1)))

    return Tensor._result(out, (x, W, b), backward)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 mean pooling; spatial dims must be even."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"avgpool2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        if x.requires_grad:
            spread = np.broadcast_to(
                g[:, :, None, :, None] * g.dtype.type(0.25), (c, h // 2, 2, w // 2, 2)
            )
            x._accum(spread.reshape(c, h, w))

    return Tensor._result(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    c, h, w = x.data.shape
    out = np.broadcast_to(x.data[:, :, None, :, None], (c, h, 2, w, 2)).reshape(c, 2 * h, 2 * w)
    out = np.ascontiguousarray(out)

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return Tensor._result(out, (x,), backward)


# ---------------------------------------------------------------------------
# Point <-> grid exchange
# ---------------------------------------------------------------------------


def scatter_mean(pointfeat: Tensor, cells: np.ndarray, m: int) -> Tensor:
    """Average point features per destination cell: out[j] = mean over {k: cells[k]=j}.

    ``cells`` is an int array of flat cell ids; OUTSIDE (-1) rows are ignored.
    Cells receiving no points stay zero.  The backward rule hands each
    contributing point 1/|cell| of the cell's gradient.
    """
    n, d = pointfeat.data.shape
    cells = np.asarray(cells, dtype=np.int64)
    if cells.shape != (n,):
        raise ShapeMismatch(f"scatter_mean: {n} feature rows vs {cells.shape} cell ids")
    if cells.size and cells.max() >= m:
        raise ShapeMismatch(f"cell id {cells.max()} out of range [0, {m})")
    valid = cells >= 0
    vcells = cells[valid]
    counts = np.bincount(vcells, minlength=m).astype(pointfeat.data.dtype)
    out = _segment_sum(pointfeat.data[valid], vcells, m)
    occupied = counts > 0
    out[occupied] /= counts[occupied, None]

    def backward(g):
        if pointfeat.requires_grad:
            dp = np.zeros_like(pointfeat.data)
            dp[valid] = g[vcells] / counts[vcells, None]
            pointfeat._accum(dp)

    return Tensor._result(out, (pointfeat,), backward)


def rows_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """Reinterpret per-cell rows (H*W, d) as a channel-first grid (d, H, W)."""
    m, d = x.data.shape
    if m != h * w:
        raise ShapeMismatch(f"rows_to_grid: {m} rows cannot fill {h}x{w}")
    out = np.ascontiguousarray(x.data.T).reshape(d, h, w)

    def backward(g):
        if x.requires_grad:
            x._accum(np.ascontiguousarray(g.reshape(d, h * w).T))

    return Tensor._result(out, (x,), backward)


def take_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather out[k] = x[ids[k]]; backward scatter-adds deterministically."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= x.data.shape[0]):
        raise ShapeMismatch(f"take_rows: ids out of range for {x.shape}")
    out = x.data[ids]

    def backward(g):
        if x.requires_grad:
            x._accum(_segment_sum(g, ids, x.data.shape[0]))

    return Tensor._result(out, (x,), backward)


def bilinear_gather(grid: Tensor, coords: np.ndarray) -> Tensor:
    """Sample a (d, H, W) grid at N continuous cell coordinates -> (N, d).

    ``coords[:, 0]`` is the x / column position and ``coords[:, 1]`` the y / row
    position, in units where integer value c sits at the center of cell c.
    Coordinates are clamped to the valid center range before weighting, and the
    backward rule scatters the weighted gradient to the four support cells.
    """
    d, h, w = grid.data.shape
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeMismatch(f"bilinear_gather: coords shape {coords.shape}")
    n = coords.shape[0]
    dt = grid.data.dtype

    cx = np.clip(coords[:, 0], 0.0, w - 1.0)
    cy = np.clip(coords[:, 1], 0.0, h - 1.0)
    if w > 1:
        x0 = np.clip(np.floor(cx).astype(np.int64), 0, w - 2)
        fx = (cx - x0).astype(dt)
        x1 = x0 + 1
    else:
        x0 = x1 = np.zeros(n, dtype=np.int64)
        fx = np.zeros(n, dtype=dt)
    if h > 1:
        y0 = np.clip(np.floor(cy).astype(np.int64), 0, h - 2)
        fy = (cy - y0).astype(dt)
        y1 = y0 + 1
    else:
        y0 = y1 = np.zeros(n, dtype=np.int64)
        fy = np.zeros(n, dtype=dt)

    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1

    # Row-major access pattern: one transpose, then contiguous row gathers.
    gt = np.ascontiguousarray(grid.data.reshape(d, h * w).T)
    out = gt[i00] * w00[:, None]
    out += gt[i01] * w01[:, None]
    out += gt[i10] * w10[:, None]
    out += gt[i11] * w11[:, None]

    def backward(g):
        if grid.requires_grad:
            vals = np.concatenate(
                [g * w00[:, None], g * w01[:, None], g * w10[:, None], g * w11[:, None]], axis=0
            )
            ids = np.concatenate([i00, i01, i10, i11])
            dg = _segment_sum(vals, ids, h * w)
            grid._accum(np.ascontiguousarray(dg.T).reshape(d, h, w))

    return Tensor._result(out, (grid,), backward)


# ---------------------------------------------------------------------------
# Losses (targets are plain arrays, not Tensors)
# ---------------------------------------------------------------------------


def mae_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error; scalar float64 output regardless of input precision."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeMismatch(f"mae_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out = np.array(np.mean(np.abs(diff), dtype=np.float64))

    def backward(g):
        if pred.requires_grad:
            pred._accum((float(g) / diff.size) * np.sign(diff))

    return Tensor._result(out, (pred,), backward)


def bce_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy on probabilities, clipped to [eps, 1-eps] for stability."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeMismatch(f"bce_loss: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    out = np.array(
        -np.mean(target * np.log(p) + (1 - target) * np.log1p(-p), dtype=np.float64)
    )

    def backward(g):
        if pred.requires_grad:
            inside = (pred.data > eps) & (pred.data < 1.0 - eps)
            dp = (p - target) / (p * (1.0 - p)) / p.size
            pred._accum(float(g) * np.where(inside, dp, dp.dtype.type(0)))

    return Tensor._result(out, (pred,), backward)
