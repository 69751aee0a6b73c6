"""Adam with decoupled weight decay, plus the cyclic learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeMismatch, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: AdamState,
    lr: float | None = None,
) -> AdamState:
    """One optimizer step, in place on ``params``.

    ``grads`` may be None to use each parameter's ``.grad`` buffer.  Weight
    decay is decoupled: ``p -= lr * wd * p`` happens before the moment update,
    so decay is independent of the gradient magnitude.
    """
    if lr is None:
        lr = state.lr
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.data.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: moment {m.shape} vs param {p.data.shape} for {name!r}")

        if state.weight_decay:
            p.data -= p.data.dtype.type(lr * state.weight_decay) * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= p.data.dtype.type(lr) * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def cyclic_lr(
    step: int, base_max_lr: float, cycle_len: int = 1000, floor_ratio: float = 0.01
) -> float:
    """Learning rate at a 0-based step under the cyclic schedule.

    Within cycle c the maximum rate is ``base_max_lr / 2**c``; across the cycle
    the rate decays linearly from that maximum down to ``floor_ratio`` times it,
    restarting at every cycle boundary.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    cycle = step // cycle_len
    peak = base_max_lr / (2.0**cycle)
    frac = (step % cycle_len) / cycle_len
    return peak - (peak - peak * floor_ratio) * frac
