"""Minimal dense tensors with reverse-mode automatic differentiation."""
from . import functional, nn
from .optim import adam_step, zero_grad
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    no_grad,
    precision,
    precision_name,
    set_precision,
)

__all__ = [
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "functional",
    "get_dtype",
    "nn",
    "no_grad",
    "precision",
    "precision_name",
    "set_precision",
    "zero_grad",
]
