"""Differentiable numeric core: reverse-mode arrays, optimizer, schedules."""

from .autodiff import (
    Array,
    NumericError,
    ShapeError,
    add,
    affine,
    batched_gather,
    broadcast_to,
    concat,
    constant,
    cosine_rows,
    gather,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    mean_pool,
    mse,
    mul,
    reshape,
    softmax,
    softmax_cross_entropy,
    sub,
    sum_all,
    sum_axis,
    transpose,
)
from .optim import (
    EmaState,
    OptimizerState,
    ParamStore,
    adamw_step,
    collect_grads,
    cosine_lr,
    ema_update,
)

__all__ = [
    "Array",
    "NumericError",
    "ShapeError",
    "add",
    "affine",
    "batched_gather",
    "broadcast_to",
    "concat",
    "constant",
    "cosine_rows",
    "gather",
    "gelu",
    "grad_check",
    "layer_norm",
    "matmul",
    "mean_pool",
    "mse",
    "mul",
    "reshape",
    "softmax",
    "softmax_cross_entropy",
    "sub",
    "sum_all",
    "sum_axis",
    "transpose",
    "ParamStore",
    "OptimizerState",
    "EmaState",
    "adamw_step",
    "collect_grads",
    "cosine_lr",
    "ema_update",
]
