"""Minimal tensor engine: primitives, transformer layers, gradient checking."""

from catsagg.engine.gradcheck import finite_diff_check
from catsagg.engine.layers import linear, mlp, multihead_attention
from catsagg.engine.tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    concat_lastdim,
    div,
    gelu,
    layernorm,
    matmul,
    mean_axis,
    mul,
    norm_lastdim,
    reshape,
    slice_,
    softmax_lastdim,
    stack,
    sub,
    sum_,
    swapaxes,
    transpose_last2,
)

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "concat_lastdim",
    "div",
    "finite_diff_check",
    "gelu",
    "layernorm",
    "linear",
    "matmul",
    "mean_axis",
    "mlp",
    "mul",
    "multihead_attention",
    "norm_lastdim",
    "reshape",
    "slice_",
    "softmax_lastdim",
    "stack",
    "sub",
    "sum_",
    "swapaxes",
    "transpose_last2",
]
