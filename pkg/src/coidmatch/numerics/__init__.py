"""Minimal dense linear algebra with reverse-mode autodiff, Adam, and RNG streams."""

from .params import ParamStore, glorot_uniform
from .rng import stream
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    dropout,
    gather_rows,
    masked_softmax_rows,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    rows_l2norm,
    scale,
    softmax_rows,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "ParamStore",
    "ShapeError",
    "Tensor",
    "add",
    "concat",
    "dropout",
    "gather_rows",
    "glorot_uniform",
    "masked_softmax_rows",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "rows_l2norm",
    "scale",
    "softmax_rows",
    "stream",
    "sub",
    "transpose",
    "tsum",
]
