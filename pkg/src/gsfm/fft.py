"""Radix-2 and naive discrete Fourier transforms on numpy arrays.

Conventions: forward transform is unnormalized, inverse carries 1/N.
Sizes that are not a power of two go through the O(N^2) matrix path.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)


@lru_cache(maxsize=None)
def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    jk = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(sign * 2j * np.pi * jk / n)


def fft_radix2(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Iterative decimation-in-time FFT along ``axis`` (unnormalized both ways)."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    n = x.shape[-1]
    if not is_pow2(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    lead = x.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    # contiguous rows, ping-pong between two buffers
    y = x.astype(ctype, copy=False).reshape(rows, n)[:, _bitrev(n)]
    out = np.empty_like(y)
    size = 2
    while size <= n:
        half = size // 2
        src = y.reshape(rows, n // size, size)
        dst = out.reshape(rows, n // size, size)
        even = src[..., :half]
        odd = src[..., half:] * _twiddles(size, inverse).astype(ctype)
        np.add(even, odd, out=dst[..., :half])
        np.subtract(even, odd, out=dst[..., half:])
        y, out = out, y
        size *= 2
    return np.moveaxis(y.reshape(lead + (n,)), -1, axis)


def dft_naive(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Direct O(N^2) DFT along ``axis`` (unnormalized both ways)."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    y = x.astype(ctype, copy=False) @ dft_matrix(x.shape[-1], inverse).T.astype(ctype)
    return np.moveaxis(y, -1, axis)


def _dft_axis(x: np.ndarray, axis: int, inverse: bool) -> np.ndarray:
    n = x.shape[axis]
    if is_pow2(n):
        return fft_radix2(x, axis, inverse)
    return dft_naive(x, axis, inverse)


def _dft_rows_cols(x: np.ndarray, inverse: bool) -> np.ndarray:
    y = _dft_axis(np.asarray(x), -1, inverse)
    y = np.ascontiguousarray(np.swapaxes(y, -1, -2))
    return np.swapaxes(_dft_axis(y, -1, inverse), -1, -2)


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT over the last two axes."""
    return _dft_rows_cols(x, False)


def ifft2(x: np.ndarray) -> np.ndarray:
    """Inverse 2-D DFT over the last two axes, scaled by 1/(H*W)."""
    h, w = x.shape[-2:]
    return _dft_rows_cols(x, True) / (h * w)


def naive_dft2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Reference 2-D transform built only from the O(N^2) matrix path."""
    y = dft_naive(dft_naive(x, -1, inverse), -2, inverse)
    if inverse:
        y = y / (x.shape[-1] * x.shape[-2])
    return y
