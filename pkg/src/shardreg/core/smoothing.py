"""Separable Gaussian and box filtering."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .types import Volume3, WarpField


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ``ceil(3 sigma)`` and normalized to sum 1."""
    if not math.isfinite(sigma) or sigma < 0:
        raise ValueError(f"sigma must be finite and >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def box_kernel1d(window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    return np.full(window, 1.0 / window)


def convolve_separable(arr: np.ndarray, kernel: np.ndarray, axes=(0, 1, 2),
                       out: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded separable correlation with a symmetric 1-D kernel along ``axes``."""
    if len(kernel) == 1 and kernel[0] == 1.0:
        if out is None:
            return arr.copy()
        out[...] = arr
        return out
    res = arr
    for ax in axes:
        res = correlate1d(res, kernel, axis=ax, mode="constant", cval=0.0)
    if out is None:
        return res
    out[...] = res
    return out


def normalized_convolve(arr: np.ndarray, kernel: np.ndarray, axes=(0, 1, 2),
                        weight_shape=None) -> np.ndarray:
    """Zero-padded separable convolution divided by the kernel mass inside the domain.

    Constant inputs stay constant up to the array edges.
    """
    num = convolve_separable(arr, kernel, axes)
    shape = weight_shape if weight_shape is not None else arr.shape[:3]
    # The normalizer factorizes into per-axis 1-D weights.
    den = np.ones(shape[:3])
    for ax in axes:
        ones = np.ones(shape[ax])
        w = correlate1d(ones, kernel, mode="constant", cval=0.0)
        view = [1, 1, 1]
        view[ax] = shape[ax]
        den = den * w.reshape(view)
    if num.ndim == 4:
        den = den[..., None]
    return num / den


def gaussian_smooth(v, sigma: float):
    """Gaussian smoothing with renormalized edge kernels.

    Accepts a :class:`Volume3`, a :class:`WarpField` (each component smoothed
    independently) or a bare array of shape ``(n0, n1, n2[, c])``, and returns
    the same kind of object. ``sigma`` is in voxels; ``sigma == 0`` returns
    the input unchanged.
    """
    kernel = gaussian_kernel1d(sigma)
    if sigma == 0:
        return v
    if isinstance(v, Volume3):
        return v.with_data(normalized_convolve(v.data, kernel).astype(v.data.dtype, copy=False))
    if isinstance(v, WarpField):
        return WarpField(normalized_convolve(v.data, kernel).astype(v.data.dtype, copy=False))
    arr = np.asarray(v)
    return normalized_convolve(arr, kernel).astype(arr.dtype, copy=False)
