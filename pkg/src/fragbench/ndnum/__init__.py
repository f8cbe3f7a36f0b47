"""Minimal dense-tensor numeric core with reverse-mode differentiation.

Everything is float64. Every kernel validates its output for NaN/Inf and
carries an analytic gradient that is checked against central finite
differences in the test suite.
"""

from .core import (
    NumericFaultError,
    GraphError,
    Tensor,
    backward,
    grad_check,
    no_grad,
    is_grad_enabled,
)
from .ops import (
    KERNELS,
    kernel,
    add,
    sub,
    mul,
    div,
    scale,
    neg,
    matmul,
    transpose,
    permute,
    bmm,
    relu,
    log,
    softmax,
    linear,
    conv2d,
    conv_transpose2d,
    maxpool2d,
    avgpool2d,
    concat,
    reshape,
    flatten,
    mean,
    tsum,
    gather_rows,
    slice_rows,
    dropout,
    batchnorm,
    constant,
    ones,
    zeros,
)
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "NumericFaultError",
    "GraphError",
    "CheckpointError",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "is_grad_enabled",
    "KERNELS",
    "kernel",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "permute",
    "bmm",
    "relu",
    "log",
    "softmax",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "avgpool2d",
    "concat",
    "reshape",
    "flatten",
    "mean",
    "tsum",
    "gather_rows",
    "slice_rows",
    "dropout",
    "batchnorm",
    "constant",
    "ones",
    "zeros",
    "save_checkpoint",
    "load_checkpoint",
]
