"""Iterative radix-2 FFT over the last axes of complex numpy arrays."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class UnsupportedSizeError(ValueError):
    """Raised for transform lengths that are not powers of two."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=32)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    half = size // 2
    return np.exp(-2j * np.pi * np.arange(half) / size)


def fft_last(a: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT along the last axis (decimation in time)."""
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise UnsupportedSizeError(f"FFT length {n} is not a power of two")
    lead = a.shape[:-1]
    out = np.asarray(a, dtype=np.complex128)[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return out


def fft2(a: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT over the last two axes."""
    h, w = a.shape[-2:]
    for n in (h, w):
        if not is_power_of_two(n):
            raise UnsupportedSizeError(f"FFT extent {n} is not a power of two (got {h}x{w})")
    rows = fft_last(a)
    return np.swapaxes(fft_last(np.swapaxes(rows, -1, -2)), -1, -2)
