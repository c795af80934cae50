"""Differentiable primitives.

Each primitive computes its forward value with numpy and registers a closure
returning one gradient per parent. Operands may carry a leading batch axis;
broadcast gradients are summed back to the operand shape.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionMismatchError
from .tensor import Tensor, as_tensor, get_dtype


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._from_op(a.data**exponent, (a,), grad_fn, "pow")


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _logistic(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def sigmoid(a: Tensor) -> Tensor:
    out = _logistic(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def silu(a: Tensor) -> Tensor:
    s = _logistic(a.data)
    out = a.data * s

    def grad_fn(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return Tensor._from_op(out, (a,), grad_fn, "silu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), grad_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), grad_fn, "log_softmax")


# --------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(a.data[index]), (a,), grad_fn, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, grad_fn, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]

    def grad_fn(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, grad_fn, "stack")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast"
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionMismatchError(
            f"matmul: contraction axis mismatch, left last axis {a.shape[-1]} vs right axis {b.shape}"
        )

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionMismatchError(
            f"linear: feature axis has size {x.shape[-1]} but weight expects {weight.shape[1]}"
        )
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[0],))

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ flat if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, grad_fn, "linear")


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add into the table."""
    idx = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(table.data[idx], (table,), grad_fn, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.dtype))


# --------------------------------------------------------------------------
# network primitives


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Cross-correlation along the last axis.

    ``x`` is ``[C_in, L]`` or ``[N, C_in, L]``; ``kernels`` is ``[C_out, C_in, K]``.
    """
    if kernels.ndim != 3:
        raise DimensionMismatchError(f"conv1d: kernels must be [C_out, C_in, K], got shape {kernels.shape}")
    if x.ndim not in (2, 3):
        raise DimensionMismatchError(f"conv1d: input must be [C_in, L] or [N, C_in, L], got shape {x.shape}")
    c_out, c_in, k = kernels.shape
    if x.shape[-2] != c_in:
        raise DimensionMismatchError(
            f"conv1d: channel axis of input has size {x.shape[-2]} but kernels expect {c_in}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionMismatchError(f"conv1d: bias axis has size {bias.shape} but kernels produce {c_out}")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    n, _, length = xd.shape
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    l_out = xd.shape[2] - k + 1
    if l_out < 1:
        raise DimensionMismatchError(f"conv1d: length axis {length} too short for kernel size {k}")
    cols = sliding_window_view(xd, k, axis=2).transpose(0, 2, 1, 3).reshape(n * l_out, c_in * k)
    w2 = kernels.data.reshape(c_out, c_in * k)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, l_out, c_out).transpose(0, 2, 1))
    if not batched:
        out = out[0]

    def grad_fn(g):
        g3 = g if batched else g[None]
        g2 = g3.transpose(0, 2, 1).reshape(n * l_out, c_out)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, l_out, c_in, k)
            dxp = np.zeros((n, c_in, l_out + k - 1), dtype=g.dtype)
            for j in range(k):
                dxp[:, :, j : j + l_out] += dcols[:, :, :, j].transpose(0, 2, 1)
            gx = dxp[:, :, padding : padding + length]
            if not batched:
                gx = gx[0]
        if kernels.requires_grad:
            gw = (g2.T @ cols).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return Tensor._from_op(out, parents, grad_fn, "conv1d")


def self_attention(x: Tensor, proj_q: Tensor, proj_k: Tensor, proj_v: Tensor, proj_out: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over the length axis, with residual.

    ``x`` is ``[C, L]`` or ``[N, C, L]``; each projection is ``[C, C]``.
    """
    c = x.shape[-2]
    for name, w in (("proj_q", proj_q), ("proj_k", proj_k), ("proj_v", proj_v), ("proj_out", proj_out)):
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionMismatchError(f"self_attention: {name} must be square, got shape {w.shape}")
        if w.shape[1] != c:
            raise DimensionMismatchError(
                f"self_attention: channel axis of input has size {c} but {name} expects {w.shape[1]}"
            )
    q = matmul(proj_q, x)
    k = matmul(proj_k, x)
    v = matmul(proj_v, x)
    scores = matmul(swap_last(k), q) * (1.0 / math.sqrt(c))
    weights = softmax(scores, axis=-2)  # normalize over keys for each query column
    return add(matmul(proj_out, matmul(v, weights)), x)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor):
    """One LSTM step with gate order (input, forget, candidate, output).

    ``x`` is ``[D]`` or ``[N, D]``; ``w_ih`` is ``[4H, D]``, ``w_hh`` is ``[4H, H]``.
    Returns ``(h, c)``.
    """
    hidden = w_hh.shape[1]
    if w_ih.shape[0] != 4 * hidden or w_hh.shape[0] != 4 * hidden or b.shape != (4 * hidden,):
        raise DimensionMismatchError(
            f"lstm_cell: gate axis mismatch, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}, hidden {hidden}"
        )
    if x.shape[-1] != w_ih.shape[1]:
        raise DimensionMismatchError(f"lstm_cell: input axis has size {x.shape[-1]} but w_ih expects {w_ih.shape[1]}")
    if h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise DimensionMismatchError(
            f"lstm_cell: state axis sizes {h_prev.shape[-1]}, {c_prev.shape[-1]} but hidden is {hidden}"
        )
    z = x.data @ w_ih.data.T + h_prev.data @ w_hh.data.T + b.data
    i = _logistic(z[..., :hidden])
    f = _logistic(z[..., hidden : 2 * hidden])
    gcand = np.tanh(z[..., 2 * hidden : 3 * hidden])
    o = _logistic(z[..., 3 * hidden :])
    c = f * c_prev.data + i * gcand
    tc = np.tanh(c)
    h = o * tc

    def grad_fn(g):
        dh = g[..., :hidden]
        dc = g[..., hidden:] + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * gcand * i * (1.0 - i),
                dc * c_prev.data * f * (1.0 - f),
                dc * i * (1.0 - gcand * gcand),
                dh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * hidden)
        gx = (dz @ w_ih.data) if x.requires_grad else None
        gh = (dz @ w_hh.data) if h_prev.requires_grad else None
        gc = dc * f if c_prev.requires_grad else None
        gw_ih = dz2.T @ x.data.reshape(-1, x.shape[-1]) if w_ih.requires_grad else None
        gw_hh = dz2.T @ h_prev.data.reshape(-1, hidden) if w_hh.requires_grad else None
        gb = dz2.sum(axis=0) if b.requires_grad else None
        if gx is not None:
            gx = _unbroadcast(gx, x.shape)
        if gh is not None:
            gh = _unbroadcast(gh, h_prev.shape)
        if gc is not None:
            gc = _unbroadcast(gc, c_prev.shape)
        return gx, gh, gc, gw_ih, gw_hh, gb

    hc = Tensor._from_op(np.concatenate([h, c], axis=-1), (x, h_prev, c_prev, w_ih, w_hh, b), grad_fn, "lstm_cell")
    return hc[..., :hidden], hc[..., hidden:]


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of ``[N, C, L]`` input over the N and L axes.

    In training mode the running statistics arrays are updated in place.
    """
    if x.ndim != 3:
        raise DimensionMismatchError(f"batch_norm: input must be [N, C, L], got shape {x.shape}")
    if gamma.shape != (x.shape[1],):
        raise DimensionMismatchError(f"batch_norm: channel axis has size {x.shape[1]} but gamma is {gamma.shape}")
    if training:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        count = x.shape[0] * x.shape[2]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def grad_fn(g):
        gg = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None]
            if training:
                m = x.shape[0] * x.shape[2]
                gx = (inv_std[None, :, None] / m) * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                )
            else:
                gx = dxhat * inv_std[None, :, None]
        return gx, gg, gb

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn, "batch_norm")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "square", "exp", "log", "tanh", "sigmoid", "relu",
    "silu", "softmax", "log_softmax", "sum", "mean", "reshape", "transpose", "swap_last", "getitem",
    "concat", "stack", "broadcast_to", "matmul", "linear", "embedding", "dropout", "conv1d",
    "self_attention", "lstm_cell", "batch_norm", "zeros", "as_tensor",
]
