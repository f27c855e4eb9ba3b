"""Spectral-domain feature filtering.

The low/high frequency modules transform a feature map with a 2-D DFT,
scale every bin by a Gaussian coefficient map, update the stacked
real/imaginary channels with two 1x1 convolutions (ReLU in between), take the
inverse transform and add the input back.

The spectrum is never centred, so the array centre holds the highest
frequencies and the corners hold the lowest.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import fft
from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor

MODES = ("low", "high", "full")


# ---------------------------------------------------------------------------
# differentiable transforms on the packed [real ‖ imag] layout
# ---------------------------------------------------------------------------


def dft2_packed(x: Tensor) -> Tensor:
    """DFT of a real ``[..., C, H, W]`` tensor as ``[..., 2C, H, W]`` (real first)."""
    spec = fft.fft2(x.data)
    out = np.concatenate([spec.real, spec.imag], axis=-3).astype(x.dtype)
    c = x.shape[-3]

    def bw(g):
        z = g[..., :c, :, :] - 1j * g[..., c:, :, :]
        return (fft.fft2(z).real.astype(x.dtype),)

    return T.make_op(out, (x,), bw, "dft2")


def idft2_packed(t: Tensor) -> Tensor:
    """Real part of the inverse DFT of a packed ``[..., 2C, H, W]`` spectrum."""
    c2 = t.shape[-3]
    if c2 % 2:
        raise ValueError(f"packed spectrum needs an even channel count, got {c2}")
    c = c2 // 2
    h, w = t.shape[-2:]
    z = t.data[..., :c, :, :] + 1j * t.data[..., c:, :, :]
    out = fft.ifft2(z).real.astype(t.dtype)

    def bw(g):
        fg = fft.fft2(g) / (h * w)
        return (np.concatenate([fg.real, fg.imag], axis=-3).astype(t.dtype),)

    return T.make_op(out, (t,), bw, "idft2")


@dataclass
class ComplexSpectrum:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real/imag shape mismatch: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def pack_complex(s: ComplexSpectrum) -> Tensor:
    return T.concat([s.real, s.imag], axis=-3)


def unpack_complex(t: Tensor) -> ComplexSpectrum:
    c2 = t.shape[-3]
    if c2 % 2:
        raise ValueError(f"cannot unpack an odd channel count ({c2})")
    c = c2 // 2
    return ComplexSpectrum(t[..., :c, :, :], t[..., c:, :, :])


def dft2(x: Tensor) -> ComplexSpectrum:
    """Per-channel 2-D DFT, DC at (0, 0), unnormalized."""
    return unpack_complex(dft2_packed(x))


def idft2(s: ComplexSpectrum, check_real: bool = True, tol: float = 1e-5) -> Tensor:
    """Inverse 2-D DFT (1/HW scaling) returning the real part.

    With ``check_real`` the imaginary residue must be negligible, i.e. the
    spectrum must be conjugate-symmetric.
    """
    if check_real:
        z = fft.ifft2(s.to_complex())
        bound = tol * max(1.0, float(np.abs(z.real).max(initial=0.0)))
        resid = float(np.abs(z.imag).max(initial=0.0))
        if resid >= bound:
            raise ValueError(f"imaginary residue {resid:.3g} exceeds {bound:.3g}; spectrum is not real")
    return idft2_packed(pack_complex(s))


# ---------------------------------------------------------------------------
# coefficient maps
# ---------------------------------------------------------------------------

_map_cache: dict[tuple, np.ndarray] = {}
_map_lock = threading.Lock()


def _gaussian_of_center_distance(sigma: float, h: int, w: int) -> np.ndarray:
    u = np.arange(h)[:, None] - h // 2
    v = np.arange(w)[None, :] - w // 2
    d2 = (u * u + v * v).astype(np.float64)
    e = np.exp(-d2 / (2.0 * sigma * sigma))
    # snap to a multiple of 2**-52 so that 1 - e is exact and low + high == 1
    return np.round(e * 2.0 ** 52) / 2.0 ** 52


def build_coefficient_map(mode: str, sigma: float, h: int, w: int, dtype=np.float64) -> Tensor:
    """Gaussian frequency mask of shape ``[1, H, W]``.

    low:  1 - exp(-D^2 / 2 sigma^2)   (0 at the array centre)
    high: exp(-D^2 / 2 sigma^2)       (1 at the array centre)
    full: all ones
    """
    if mode not in MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    key = (mode, float(sigma), int(h), int(w), np.dtype(dtype).str)
    cached = _map_cache.get(key)
    if cached is None:
        if mode == "full":
            g = np.ones((h, w))
        else:
            e = _gaussian_of_center_distance(sigma, h, w)
            g = e if mode == "high" else 1.0 - e
        cached = g.reshape(1, h, w).astype(dtype)
        cached.setflags(write=False)
        with _map_lock:
            cached = _map_cache.setdefault(key, cached)
    return Tensor(cached, dtype=cached.dtype)


@dataclass
class FrequencyFilter:
    mode: str = "low"
    cutoff_sigma: float = 7.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if not self.cutoff_sigma > 0:
            raise ValueError("cutoff_sigma must be positive")

    def coefficient_map(self, h: int, w: int, dtype=np.float64) -> Tensor:
        return build_coefficient_map(self.mode, self.cutoff_sigma, h, w, dtype)


class SpectralFilterModule(Module):
    """LFM (mode="low") / HFM (mode="high"); mode="full" keeps every bin."""

    def __init__(self, channels: int, mode: str, sigma: float, rng: np.random.Generator, dtype=np.float64):
        self.channels = channels
        self.filter = FrequencyFilter(mode, sigma)
        self.conv1 = Conv2d(2 * channels, 2 * channels, 1, rng, dtype=dtype)
        self.conv2 = Conv2d(2 * channels, 2 * channels, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return spectral_filter_forward(self, x)


def spectral_filter_forward(m: SpectralFilterModule, x: Tensor) -> Tensor:
    if x.shape[-3] != m.channels:
        raise ValueError(f"expected {m.channels} channels, got {x.shape[-3]}")
    h, w = x.shape[-2:]
    y = dft2_packed(x)
    y = y * m.filter.coefficient_map(h, w, x.dtype)
    t = T.relu(m.conv1(y))
    t = m.conv2(t)
    return idft2_packed(t) + x
