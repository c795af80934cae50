"""Small layer library on top of the functional primitives."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, get_dtype


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container whose Parameter/Module attributes form an ordered parameter tree."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            p.assign(state[name])
        for name, buf in buffers.items():
            buf[...] = state[name]

    def cast(self, dtype) -> Module:
        for p in self.parameters():
            p.cast(dtype)
        for m in self.modules():
            for name in getattr(m, "_buffer_names", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear"):
        self.weight = Parameter(uniform_init(rng, (n_out, n_in), n_in), name=f"{name}.weight")
        self.bias = Parameter(uniform_init(rng, (n_out,), n_in), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv1d(Module):
    """Length-preserving 1-D convolution (odd kernel, symmetric padding)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, name: str = "conv", zero: bool = False):
        if kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        fan_in = c_in * kernel
        if zero:
            w, b = np.zeros((c_out, c_in, kernel)), np.zeros(c_out)
        else:
            w, b = uniform_init(rng, (c_out, c_in, kernel), fan_in), uniform_init(rng, (c_out,), fan_in)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(b, name=f"{name}.bias")
        self.padding = (kernel - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, padding=self.padding)


class SelfAttention(Module):
    def __init__(self, channels: int, rng: np.random.Generator, name: str = "attn"):
        shape = (channels, channels)
        self.proj_q = Parameter(uniform_init(rng, shape, channels), name=f"{name}.proj_q")
        self.proj_k = Parameter(uniform_init(rng, shape, channels), name=f"{name}.proj_k")
        self.proj_v = Parameter(uniform_init(rng, shape, channels), name=f"{name}.proj_v")
        self.proj_out = Parameter(uniform_init(rng, shape, channels), name=f"{name}.proj_out")

    def __call__(self, x: Tensor) -> Tensor:
        return F.self_attention(x, self.proj_q, self.proj_k, self.proj_v, self.proj_out)


class BatchNorm1d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, name: str = "bn", momentum: float = 0.1):
        self.gamma = Parameter(np.ones(channels), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())
        self.momentum = momentum

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum)


class LSTM(Module):
    """Unidirectional LSTM over a sequence of ``[N, D]`` frames."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.hidden = hidden
        self.w_ih = Parameter(uniform_init(rng, (4 * hidden, n_in), hidden), name=f"{name}.w_ih")
        self.w_hh = Parameter(uniform_init(rng, (4 * hidden, hidden), hidden), name=f"{name}.w_hh")
        self.b = Parameter(uniform_init(rng, (4 * hidden,), hidden), name=f"{name}.b")

    def __call__(self, frames: list[Tensor], reverse: bool = False) -> list[Tensor]:
        batch_shape = frames[0].shape[:-1]
        h = F.zeros(batch_shape + (self.hidden,))
        c = F.zeros(batch_shape + (self.hidden,))
        order = range(len(frames) - 1, -1, -1) if reverse else range(len(frames))
        outputs: list[Tensor | None] = [None] * len(frames)
        for t in order:
            h, c = F.lstm_cell(frames[t], h, c, self.w_ih, self.w_hh, self.b)
            outputs[t] = h
        return outputs  # type: ignore[return-value]
