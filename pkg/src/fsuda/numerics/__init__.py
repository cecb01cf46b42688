"""Dense tensors with reverse-mode differentiation and a gradient checker."""

from .gradcheck import gradient_check
from .ops import (
    NonFiniteError,
    adaptive_avg_pool2d,
    add,
    clip,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    grad_reverse,
    l2_normalize_rows,
    linear_map,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    pool2d,
    power,
    relu,
    reshape,
    sigmoid,
    sub,
    swap_last,
    transpose,
)
from .ops import sum as tsum
from .optim import Adam, step_decay
from .tensor import ParamTape, Tensor, as_tensor, get_dtype, precision, set_precision

__all__ = [
    "Adam", "NonFiniteError", "ParamTape", "Tensor", "adaptive_avg_pool2d", "add",
    "as_tensor", "clip", "concat", "conv2d", "div", "exp", "get_dtype", "getitem",
    "grad_reverse", "gradient_check", "l2_normalize_rows", "linear_map", "log",
    "log_softmax", "logsumexp", "matmul", "mean", "mul", "pool2d", "power",
    "precision", "relu", "reshape", "set_precision", "sigmoid", "step_decay", "sub",
    "swap_last", "transpose", "tsum",
]
