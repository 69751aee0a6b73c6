"""Minimal differentiable-array core: tensors, the fixed op set, Adam, schedules."""

from .ckpt import CheckpointError, read_arrays, write_arrays
from .grad import NonFiniteGradient, adjoint_gap, dot, gradcheck, op_gradcheck_suite
from .ops import (
    OUTSIDE,
    add,
    avgpool2,
    bce_loss,
    bilinear_gather,
    concat,
    conv2d,
    linear,
    mae_loss,
    relu,
    rows_to_grid,
    scale,
    scatter_mean,
    sigmoid,
    take_rows,
    upsample2,
)
from .optim import AdamState, adam_step, cyclic_lr
from .tensor import NonFiniteValues, ShapeMismatch, Tensor, no_grad, set_finite_checks

__all__ = [
    "AdamState",
    "CheckpointError",
    "NonFiniteGradient",
    "NonFiniteValues",
    "OUTSIDE",
    "ShapeMismatch",
    "Tensor",
    "adam_step",
    "add",
    "adjoint_gap",
    "avgpool2",
    "bce_loss",
    "bilinear_gather",
    "concat",
    "conv2d",
    "cyclic_lr",
    "dot",
    "gradcheck",
    "linear",
    "mae_loss",
    "no_grad",
    "op_gradcheck_suite",
    "read_arrays",
    "relu",
    "rows_to_grid",
    "scale",
    "scatter_mean",
    "set_finite_checks",
    "sigmoid",
    "take_rows",
    "upsample2",
    "write_arrays",
]
