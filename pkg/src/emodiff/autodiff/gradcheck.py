"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward, precision


def numeric_gradient(f: Callable[[], float], param: Parameter, step: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``param`` (all elements, or the flat ``indices`` only; others stay 0)."""
    base = param.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        param.assign(base)
        up = f()
        flat[i] = orig - step
        param.assign(base)
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2.0 * step)
    param.assign(base)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare analytic and numeric gradients; return relative error per parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call and be deterministic. Runs in 64-bit precision. With
    ``max_elements`` set, larger parameters are probed on a seeded random
    subset of that many elements.
    """
    pick = np.random.default_rng(seed)
    with precision("f64"):
        for p in params:
            p.cast(np.float64)
        loss = loss_fn()
        for p in params:
            p.grad = None
        backward(loss)
        keys = [p.name if p.name and [q.name for q in params].count(p.name) == 1 else f"{i}:{p.name}"
                for i, p in enumerate(params)]
        analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in zip(keys, params)}

        def f() -> float:
            return float(loss_fn().data)

        errors = {}
        for key, p in zip(keys, params):
            if max_elements is None or p.data.size <= max_elements:
                errors[key] = relative_error(analytic[key], numeric_gradient(f, p, step))
                continue
            idx = np.sort(pick.choice(p.data.size, max_elements, replace=False))
            numeric = numeric_gradient(f, p, step, idx).reshape(-1)[idx]
            errors[key] = relative_error(analytic[key].reshape(-1)[idx], numeric)
    return errors


def params_from(*arrays: np.ndarray, prefix: str = "x") -> list[Parameter]:
    with precision("f64"):
        return [Parameter(np.asarray(a, dtype=np.float64), name=f"{prefix}{i}") for i, a in enumerate(arrays)]
