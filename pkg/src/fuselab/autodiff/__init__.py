"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .gradcheck import grad_check, numeric_grad, relative_error, run_op_suite
from .ops import (
    absolute,
    add,
    bicubic_downsample,
    bilinear_resample,
    channel_avg_pool,
    channel_max_pool,
    concat,
    conv2d,
    div,
    global_avg_pool,
    leaky_relu,
    linear_resample,
    mean,
    mul,
    power,
    reshape,
    sigmoid,
    sub,
    take,
)
from .tensor import Tensor, as_tensor, backward, grad, parameter

__all__ = [
    "Tensor", "as_tensor", "backward", "grad", "parameter", "ops",
    "grad_check", "numeric_grad", "relative_error", "run_op_suite",
    "absolute", "add", "bicubic_downsample", "bilinear_resample", "channel_avg_pool",
    "channel_max_pool", "concat", "conv2d", "div", "global_avg_pool", "leaky_relu",
    "linear_resample", "mean", "mul", "power", "reshape", "sigmoid", "sub", "take",
]
