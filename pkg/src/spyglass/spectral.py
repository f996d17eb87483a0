"""Magnitude-spectrum extraction for the spectral pathway.

An RGB image becomes a single-channel map in four steps: resize to the
working resolution, luma grayscale, unnormalized forward 2-D DFT, then a
center-shifted log-magnitude map min-max normalized to [0, 1]. Periodic
artifacts left by synthetic upsampling show up as off-center peaks in this
map, which is what the spectral encoder trains on.

The transform uses an iterative radix-2 FFT whenever an axis length is a
power of two and falls back to a dense DFT-matrix product otherwise. Both
paths compute X[u,v] = sum_{h,w} x[h,w] * exp(-2*pi*i*(u*h/H + v*w/W)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import resize_bilinear

DEFAULT_LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_grayscale(image, weights=DEFAULT_LUMA_WEIGHTS):
    """Weighted channel mix of an HxWx3 raster; weights must sum to 1."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,):
        raise ValueError(f"expected 3 channel weights, got {w.shape}")
    if np.any(w < 0):
        raise ValueError(f"channel weights must be non-negative, got {tuple(w)}")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"channel weights sum to {w.sum()!r}, expected 1")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    return image @ w


def _bit_reversal(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft_radix2(a):
    """Iterative Cooley-Tukey along the last axis (power-of-two length)."""
    n = a.shape[-1]
    out = np.ascontiguousarray(a[..., _bit_reversal(n)], dtype=np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        odd = blocks[..., half:] * twiddle
        even = blocks[..., :half].copy()
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    return out


def _dft_matrix(n):
    u = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(u, u) / n)


def _fft_last_axis(a):
    n = a.shape[-1]
    if n == 1:
        return a.astype(np.complex128)
    if n & (n - 1) == 0:
        return _fft_radix2(a)
    return a @ _dft_matrix(n)


def _fft2_nd(a):
    """Forward 2-D DFT over the trailing two axes of a real/complex array."""
    a = np.asarray(a, dtype=np.complex128)
    out = _fft_last_axis(a)
    out = _fft_last_axis(out.swapaxes(-1, -2)).swapaxes(-1, -2)
    return out


def fft2(image):
    """Unnormalized forward 2-D DFT of a single HxW image."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"fft2 expects a 2-d array, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"fft2 needs H, W >= 1, got shape {image.shape}")
    return _fft2_nd(image)


def fftshift2(a):
    """Move the zero-frequency bin to the array center (trailing two axes)."""
    return np.roll(a, (a.shape[-2] // 2, a.shape[-1] // 2), axis=(-2, -1))


@dataclass
class Spectrum:
    """Normalized magnitude-spectrum map with its layout metadata."""

    values: np.ndarray
    shifted: bool
    log_scaled: bool

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def _normalized_magnitude(freq, shift, log_scale):
    mag = np.abs(freq)
    if shift:
        mag = fftshift2(mag)
    if log_scale:
        mag = np.log1p(mag)
    lo = mag.min(axis=(-2, -1), keepdims=True)
    hi = mag.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    # A constant spectrum normalizes to all zeros instead of erroring, so a
    # degenerate input cannot abort a training run.
    safe = np.where(span > 0, span, 1.0)
    out = (mag - lo) / safe
    return np.where(span > 0, out, 0.0)


def magnitude_spectrum(freq, shift=True, log_scale=True):
    """|X|, optionally center-shifted and log(1+.)-scaled, min-maxed to [0,1]."""
    freq = np.asarray(freq)
    return Spectrum(
        values=_normalized_magnitude(freq, shift, log_scale),
        shifted=shift,
        log_scaled=log_scale,
    )


def spectral_input_batch(images, side, weights=DEFAULT_LUMA_WEIGHTS):
    """Spectrum maps for a batch of RGB rasters, as float32 [N,1,side,side]."""
    grays = []
    for image in images:
        image = np.asarray(image)
        if image.shape[:2] != (side, side):
            image = resize_bilinear(image, side, side)
        grays.append(to_grayscale(image, weights))
    freq = _fft2_nd(np.stack(grays))
    maps = _normalized_magnitude(freq, shift=True, log_scale=True)
    return maps[:, None, :, :].astype(np.float32)


def spectral_input(image, side):
    """Single-image pipeline: resize, grayscale, DFT, normalized magnitude."""
    if side < 1:
        raise ValueError(f"side must be positive, got {side}")
    return Tensor(spectral_input_batch([image], side)[0])
