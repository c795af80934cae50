"""Adaptive-moment parameter updates."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from ..errors import NumericalError
from .tensor import Parameter


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected adaptive-moment update to every parameter.

    Uses the folded form ``lr_t = lr * sqrt(1 - beta2**t) / (1 - beta1**t)``
    with ``eps`` added to the uncorrected ``sqrt(v)``. Parameters without a
    gradient are treated as having a zero gradient.
    """
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise NumericalError(f"non-finite gradient in parameter {p.name!r} ({bad} entries)")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        lr_t = lr * math.sqrt(1.0 - beta2**p.step) / (1.0 - beta1**p.step)
        p.assign(p.data - lr_t * p.m / (np.sqrt(p.v) + eps))


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
