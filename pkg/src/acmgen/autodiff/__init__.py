"""Minimal float64 tensor library with tape-based reverse-mode autodiff."""

from .kernels import BACKEND
from .optim import AdamW, AdamWState, NamedParam
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy_masked,
    embedding,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    scale,
    softmax,
    transpose,
    tsum,
)

__all__ = [
    "BACKEND", "AdamW", "AdamWState", "NamedParam", "ShapeError", "Tape", "Tensor", "add",
    "backward", "concat", "cross_entropy_masked", "embedding", "exp", "gelu", "getitem",
    "is_grad_enabled", "layer_norm", "linear", "log", "matmul", "mean", "mul", "neg", "no_grad",
    "reshape", "scale", "softmax", "transpose", "tsum",
]
