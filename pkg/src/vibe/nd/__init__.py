"""Minimal reverse-mode differentiable array engine."""

from .conv import conv2d, output_extent, resize2d, resize_axis, upsample_nearest2x
from .functional import (
    concatenate,
    gelu,
    group_norm,
    layer_norm,
    mse_loss,
    normalize,
    softmax,
    sort,
)
from .nn import Conv2d, GroupNorm, LayerNorm, Linear, Module, Parameter
from .optim import AdamW, clip_global_norm, global_grad_norm
from .tensor import (
    Node,
    Tape,
    Tensor,
    abs_,
    add,
    as_tensor,
    astype,
    backward,
    broadcast_to,
    clamp,
    div,
    exp,
    expm1,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    set_finite_checks,
    sqrt,
    sub,
    sum_,
    tanh,
    transpose,
    zero_grad,
)

__all__ = [
    "AdamW", "Conv2d", "GroupNorm", "LayerNorm", "Linear", "Module", "Node", "Parameter",
    "Tape", "Tensor", "abs_", "add", "as_tensor", "astype", "backward", "broadcast_to",
    "clamp", "clip_global_norm", "concatenate", "conv2d", "div", "exp", "expm1", "gelu", "getitem",
    "global_grad_norm", "group_norm", "is_grad_enabled", "layer_norm", "log", "matmul",
    "mean", "mse_loss", "mul", "neg", "no_grad", "normalize", "output_extent", "power",
    "reshape", "resize2d", "resize_axis", "set_finite_checks", "softmax", "sort", "sqrt",
    "sub", "sum_", "tanh", "transpose", "upsample_nearest2x", "zero_grad",
]
