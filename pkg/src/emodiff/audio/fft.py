"""Iterative radix-2 FFT over the last axis."""
from __future__ import annotations

import numpy as np


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _transform(x, sign: float) -> np.ndarray:
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    batch = a.shape[:-1]
    a = a[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(batch + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(batch + (n,))
        size *= 2
    return a


def fft(x) -> np.ndarray:
    """Unnormalized forward DFT: ``X[k] = sum_t x[t] exp(-2j pi k t / n)``."""
    return _transform(x, -1.0)


def ifft(x) -> np.ndarray:
    """Inverse DFT with 1/n normalization."""
    out = _transform(x, 1.0)
    return out / out.shape[-1]


def naive_dft(x) -> np.ndarray:
    """O(n^2) reference DFT."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n).T
