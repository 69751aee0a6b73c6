"""Finite-difference gradient verification for the op set."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


class NonFiniteGradient(Exception):
    pass


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def gradcheck(
    fn,
    inputs: list[Tensor],
    h: float = 1e-5,
    entries_per_input: int | None = None,
    seed: int = 0,
    exclude_kinks: bool = False,
) -> float:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    The (possibly non-scalar) output is reduced to a scalar through a fixed
    random projection so one backward pass covers every output entry.  Returns
    the worst relative error over all checked input entries, where relative
    error is ``|a - n| / max(|a|, |n|, 1)``.  ``entries_per_input`` limits the
    number of probed entries per input (all entries when None).

    With ``exclude_kinks``, probes whose one-sided slopes disagree are skipped:
    the step straddled a non-smooth point (ReLU kink, clamp edge), where a
    central difference estimates nothing.  A genuinely wrong gradient yields
    *consistent* one-sided slopes and is still reported.
    """
    rng = np.random.default_rng(seed)

    out = fn(*inputs)
    proj = rng.standard_normal(out.data.shape)

    for t in inputs:
        t.zero_grad()
    out.backward(grad=proj.astype(out.data.dtype), release=False)

    analytic = []
    for t in inputs:
        if not t.requires_grad:
            analytic.append(None)
            continue
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            if not np.all(np.isfinite(t.grad)):
                raise NonFiniteGradient("analytic gradient contains NaN/Inf")
            analytic.append(t.grad.copy())

    def scalar_eval() -> float:
        with no_grad():
            probe = fn(*inputs)
        return float(np.sum(probe.data * proj))

    f_base = scalar_eval() if exclude_kinks else 0.0
    worst = 0.0
    for t, a in zip(inputs, analytic):
        if a is None:
            continue
        flat = t.data.reshape(-1)
        n_entries = flat.size
        if entries_per_input is not None and n_entries > entries_per_input:
            idx = rng.choice(n_entries, size=entries_per_input, replace=False)
        else:
            idx = np.arange(n_entries)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = scalar_eval()
            flat[i] = orig - h
            f_minus = scalar_eval()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(numeric):
                raise NonFiniteGradient(f"non-finite finite-difference at entry {i}")
            a_i = float(a.reshape(-1)[i])
            if exclude_kinks:
                slope_r = (f_plus - f_base) / h
                slope_l = (f_base - f_minus) / h
                gap = abs(slope_r - slope_l)
                if gap > 0.05 * max(abs(numeric), abs(a_i), 1.0):
                    continue
            worst = max(worst, _rel_err(a_i, numeric))
    return worst


def op_gradcheck_suite(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Run every registered op through gradcheck in float64.

    Inputs are kept away from non-smooth spots (ReLU kinks, bilinear cell
    boundaries, clamp edges, |x|=0) by construction, since finite differences
    are meaningless there.  Returns op name -> worst relative error.
    """
    from . import ops

    rng = np.random.default_rng(seed)

    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    results: dict[str, float] = {}

    x, w, b = t((8, 4)), t((4, 5)), t((5,))
    results["linear"] = gradcheck(ops.linear, [x, w, b], h=h)

    xr = Tensor(np.where(np.abs(a := rng.uniform(-1, 1, (6, 7))) < 0.01, 0.5, a),
                requires_grad=True)
    results["relu"] = gradcheck(ops.relu, [xr], h=h)

    results["sigmoid"] = gradcheck(ops.sigmoid, [t((5, 5), -3, 3)], h=h)
    results["add"] = gradcheck(ops.add, [t((4, 6)), t((4, 6))], h=h)
    results["scale"] = gradcheck(lambda x: ops.scale(x, -2.5), [t((4, 6))], h=h)
    results["concat"] = gradcheck(lambda a, b: ops.concat([a, b], 1), [t((3, 4)), t((3, 2))], h=h)

    xc, wc, bc = t((3, 6, 5)), t((4, 3, 3, 3)), t((4,))
    results["conv2d_3x3"] = gradcheck(ops.conv2d, [xc, wc, bc], h=h)
    results["conv2d_1x1"] = gradcheck(ops.conv2d, [t((3, 4, 4)), t((2, 3, 1, 1)), t((2,))], h=h)

    results["avgpool2"] = gradcheck(ops.avgpool2, [t((3, 6, 4))], h=h)
    results["upsample2"] = gradcheck(ops.upsample2, [t((3, 3, 2))], h=h)
    results["rows_to_grid"] = gradcheck(lambda x: ops.rows_to_grid(x, 3, 4), [t((12, 5))], h=h)

    cells = rng.integers(-1, 9, 20)
    results["scatter_mean"] = gradcheck(lambda p: ops.scatter_mean(p, cells, 9), [t((20, 4))], h=h)

    ids = rng.integers(0, 7, 15)
    results["take_rows"] = gradcheck(lambda x: ops.take_rows(x, ids), [t((7, 4))], h=h)

    # Fractional interior coords: away from integer knots and the clamp border.
    coords = np.column_stack(
        [rng.uniform(0.55, 4.45, 15), rng.uniform(0.55, 3.45, 15)]
    )
    coords += np.where(np.abs(coords - np.round(coords)) < 0.05, 0.1, 0.0)
    results["bilinear_gather"] = gradcheck(
        lambda g: ops.bilinear_gather(g, coords), [t((3, 5, 6))], h=h
    )

    target = rng.uniform(-1, 1, (6, 6))
    pred = Tensor(target + rng.choice([-1, 1], (6, 6)) * rng.uniform(0.2, 1.0, (6, 6)),
                  requires_grad=True)
    results["mae_loss"] = gradcheck(lambda p: ops.mae_loss(p, target), [pred], h=h)

    probs = Tensor(rng.uniform(0.05, 0.95, (6, 6)), requires_grad=True)
    labels = rng.integers(0, 2, (6, 6)).astype(np.float64)
    results["bce_loss"] = gradcheck(lambda p: ops.bce_loss(p, labels), [probs], h=h)

    return results


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Flat inner product, accumulated in float64."""
    return float(np.sum(a.astype(np.float64) * b.astype(np.float64)))


def adjoint_gap(fn, x: Tensor, u: np.ndarray, v: np.ndarray) -> float:
    """|<A u, v> - <u, A^T v>| for the linear map ``A = fn`` at input ``x``.

    ``fn`` must be linear in ``x`` (scatter/gather are, for fixed geometry);
    ``u`` has the shape of ``x`` and ``v`` the shape of the output.
    """
    x_u = Tensor(u, requires_grad=True, dtype=x.data.dtype)
    out = fn(x_u)
    lhs = dot(out.data, v)
    x_u.zero_grad()
    out.backward(grad=v.astype(out.data.dtype), release=False)
    atv = x_u.grad if x_u.grad is not None else np.zeros_like(u)
    rhs = dot(u, atv)
    return abs(lhs - rhs)
