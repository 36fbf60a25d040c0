"""Synthetic labeled image pairs with a known deformation."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..core.smoothing import convolve_separable, gaussian_kernel1d, gaussian_smooth
from ..core.types import LabelVolume, Volume3, WarpField
from ..sampler import fused_sample, sample_nearest


class SynthPair(NamedTuple):
    F: Volume3
    M: Volume3
    L_F: LabelVolume
    L_M: LabelVolume
    u_true: WarpField
    mu: np.ndarray
    sigma: np.ndarray
    F_raw: np.ndarray


def _paint_ellipsoids(rng: np.random.Generator, dims, K: int) -> np.ndarray:
    dims = np.asarray(dims)
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"), axis=-1)
    labels = np.zeros(tuple(dims), dtype=np.int32)
    for k in range(1, K + 1):
        center = rng.uniform(0.25, 0.75, 3) * (dims - 1)
        radii = rng.uniform(0.08, 0.2, 3) * dims
        rot, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        local = (grid - center) @ rot
        inside = np.sum((local / radii) ** 2, axis=-1) <= 1.0
        labels[inside] = k
    return labels


def random_warp(rng: np.random.Generator, dims, max_disp: float, smoothness: float) -> np.ndarray:
    """Smoothed noise rescaled so the largest displacement norm is ``max_disp``.

    Noise is drawn on a margin-padded lattice and cropped after filtering so
    the field is statistically uniform up to the volume edges.
    """
    kernel = gaussian_kernel1d(smoothness)
    r = len(kernel) // 2
    noise = rng.standard_normal(tuple(d + 2 * r for d in dims) + (3,))
    field = convolve_separable(noise, kernel)[r:r + dims[0], r:r + dims[1], r:r + dims[2]]
    peak = np.sqrt(np.sum(field ** 2, axis=-1)).max()
    if max_disp == 0 or peak == 0:
        return np.zeros_like(field)
    return field * (max_disp / peak)


def synth_pair(seed: int, dims=(48, 48, 48), K: int = 8, max_disp: float = 0.15,
               smoothness: float | None = None, blur: float = 0.75) -> SynthPair:
    """Labeled ellipsoid phantom ``F`` and its deformed copy ``M(x) = F(x + u_true(x))``.

    Labels are painted in order, so later ellipsoids overwrite earlier ones.
    Each label gets a mean and spread drawn once; voxels draw i.i.d. normal
    intensities around them; background stays 0. ``smoothness`` is the
    voxel sigma of the warp's smoothing filter (defaults to ``min(dims) / 6``).
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 16:
        raise ValueError(f"synthetic volumes need every axis >= 16, got {dims}")
    if not 1 <= K <= 16:
        raise ValueError(f"label count must be in [1, 16], got {K}")
    if not 0 <= max_disp <= 0.15:
        raise ValueError(f"max displacement must be in [0, 0.15], got {max_disp}")
    rng = np.random.default_rng(seed)
    labels = _paint_ellipsoids(rng, dims, K)
    mu = rng.uniform(0.2, 1.0, K + 1)
    sigma = rng.uniform(0.01, 0.05, K + 1)
    mu[0] = 0.0
    sigma[0] = 0.0
    noise = rng.standard_normal(dims)
    raw = mu[labels] + sigma[labels] * noise
    img = gaussian_smooth(raw, blur)
    if smoothness is None:
        smoothness = min(dims) / 6.0
    u = random_warp(rng, dims, max_disp, smoothness)
    moved = fused_sample(img, u)
    moved_labels = sample_nearest(labels, u)
    return SynthPair(
        F=Volume3(img),
        M=Volume3(moved),
        L_F=LabelVolume(labels),
        L_M=LabelVolume(moved_labels),
        u_true=WarpField(u),
        mu=mu,
        sigma=sigma,
        F_raw=raw,
    )
