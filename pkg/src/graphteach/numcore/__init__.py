"""Numeric core: float64 kernels plus reverse-mode differentiation."""

from . import tape
from .kernels import (
    LN_EPS,
    NORM_EPS,
    as_tensor2d,
    cosine,
    gelu,
    gelu_grad,
    l2_normalize,
    l2_normalize_rows,
    layer_norm,
    matmul,
    softmax_rows,
)
from .tape import Node, Param, backward, constant, gradients, zero_grads

__all__ = [
    "LN_EPS",
    "NORM_EPS",
    "Node",
    "Param",
    "as_tensor2d",
    "backward",
    "constant",
    "cosine",
    "gelu",
    "gelu_grad",
    "gradients",
    "l2_normalize",
    "l2_normalize_rows",
    "layer_norm",
    "matmul",
    "softmax_rows",
    "tape",
    "zero_grads",
]
