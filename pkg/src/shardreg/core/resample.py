"""Moving volumes and warps between pyramid levels."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy.ndimage import correlate1d

from .smoothing import gaussian_kernel1d
from .types import Volume3, WarpField


def _linear_axis(arr: np.ndarray, n_new: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == n_new:
        return arr
    if n == 1:
        return np.repeat(arr, n_new, axis=axis)
    # align-corners: first and last voxel centers are preserved
    pos = np.arange(n_new, dtype=np.float64) * ((n - 1) / (n_new - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = n_new
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, lo + 1, axis=axis)
    return a + frac * (b - a)


def resample_array(arr: np.ndarray, new_dims) -> np.ndarray:
    """Separable trilinear resampling of ``(n0, n1, n2[, c])`` onto ``new_dims``."""
    out = arr
    for ax in range(3):
        out = _linear_axis(out, int(new_dims[ax]), ax)
    return out


def scaled_dims(dims, factor) -> tuple[int, int, int]:
    f = Fraction(factor).limit_denominator(10**6)
    return tuple(int(math.ceil(Fraction(d) * f)) for d in dims)


def _odd_reflect_smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    # Point reflection about the edge voxel keeps constants and linear ramps exact.
    kernel = gaussian_kernel1d(sigma)
    r = len(kernel) // 2
    out = arr
    for ax in range(3):
        pad = [(0, 0)] * arr.ndim
        pad[ax] = (r, r)
        padded = np.pad(out, pad, mode="reflect", reflect_type="odd")
        full = correlate1d(padded, kernel, axis=ax, mode="constant", cval=0.0)
        out = np.take(full, np.arange(r, r + arr.shape[ax]), axis=ax)
    return out


def resample_scale(v: Volume3, factor) -> Volume3:
    """Resample a volume by ``factor`` (``< 1`` downsamples).

    Downsampling first applies an anti-alias Gaussian with sigma ``0.5 / factor``
    voxels. Physical extent is preserved: the first voxel center stays at
    ``origin`` and the spacing grows by ``(n - 1) / (n_new - 1)``.
    """
    if not factor > 0:
        raise ValueError(f"factor must be positive, got {factor}")
    new_dims = scaled_dims(v.dims, factor)
    if min(new_dims) < 2:
        raise ValueError(f"resampled lattice {new_dims} has an axis shorter than 2")
    if new_dims == v.dims:
        return v.with_data(v.data.copy())
    data = v.data.astype(np.float64)
    if factor < 1:
        data = _odd_reflect_smooth(data, 0.5 / float(factor))
    data = resample_array(data, new_dims).astype(v.data.dtype, copy=False)
    old = np.array(v.dims, dtype=np.float64)
    new = np.array(new_dims, dtype=np.float64)
    spacing = v.spacing * np.where(old > 1, (old - 1) / (new - 1), 1.0)
    return Volume3(data, spacing, v.origin.copy())


def resample_warp(u: WarpField, new_dims) -> WarpField:
    """Trilinear upsampling of a warp; normalized displacements carry over unchanged."""
    return WarpField(resample_array(u.data, tuple(new_dims)))
