"""Mattes mutual information with Parzen-window histograms.

Intensities live in ``[0, 1]`` and bin ``j`` has center ``b_j = (j + 0.5) / B``.
Kernels are written in bin units: a sample ``I`` contributes to bin ``j`` with
weight ``kappa((b_j - I) B)``. Each sample's weights are normalized to sum to
one over the bins, so every histogram is a proper distribution and the joint
marginalizes exactly onto the 1-D histograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

DEFAULT_BINS = 32

_GAUSSIAN, _BSPLINE, _DELTA = 0, 1, 2


@dataclass(frozen=True)
class ParzenKernel:
    """A window function ``kappa(x)`` over offsets ``x`` measured in bin widths.

    ``derivative`` is ``d kappa / dx``; with respect to the intensity it picks
    up a factor ``-B``.
    """

    kind: str = "gaussian"
    sigma: float = 0.5
    radius: float = field(init=False)
    scale: float = field(init=False)
    shift: float = field(init=False)

    def __post_init__(self):
        if self.kind == "gaussian":
            if not self.sigma > 0:
                raise ValueError(f"sigma must be positive, got {self.sigma}")
            radius = 3.0 * self.sigma
            shift = math.exp(-4.5)
            # continuous integral of exp(-x^2 / 2 s^2) - shift over [-3s, 3s]
            area = self.sigma * math.sqrt(2 * math.pi) * math.erf(3 / math.sqrt(2)) - 2 * radius * shift
            scale = 1.0 / area
        elif self.kind == "bspline":
            radius, shift, scale = 2.0, 0.0, 1.0
        elif self.kind == "delta":
            radius, shift, scale = 0.5, 0.0, 1.0
        else:
            raise ValueError(f"unknown kernel {self.kind!r}")
        object.__setattr__(self, "radius", radius)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)
        if self.kind != "delta":
            x = np.linspace(-radius, radius, 20001)
            y = self.evaluate(x)
            integral = float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))
            if abs(integral - 1.0) > 1e-3:
                raise ValueError(f"kernel integrates to {integral}, expected 1")

    @property
    def code(self) -> int:
        return {"gaussian": _GAUSSIAN, "bspline": _BSPLINE, "delta": _DELTA}[self.kind]

    @property
    def params(self) -> tuple:
        return (self.code, float(self.sigma), self.scale, self.shift, self.radius)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.vectorize(lambda v: _kappa(v, *self.params)[0], otypes=[np.float64])(x)

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.vectorize(lambda v: _kappa(v, *self.params)[1], otypes=[np.float64])(x)


@njit(cache=True)
def _kappa(x, code, sigma, scale, shift, radius):
    """Kernel value and its derivative in ``x``."""
    if code == _GAUSSIAN:
        if abs(x) > radius:
            return 0.0, 0.0
        e = math.exp(-0.5 * x * x / (sigma * sigma))
        return scale * (e - shift), -scale * e * x / (sigma * sigma)
    if code == _BSPLINE:
        a = abs(x)
        s = 1.0 if x >= 0 else -1.0
        if a < 1.0:
            return 2.0 / 3.0 - a * a + 0.5 * a * a * a, s * (-2.0 * a + 1.5 * a * a)
        if a < 2.0:
            r = 2.0 - a
            return r * r * r / 6.0, -s * 0.5 * r * r
        return 0.0, 0.0
    # delta: handled by hard assignment in _weights
    return 0.0, 0.0


@njit(cache=True)
def _weights(v, B, code, sigma, scale, shift, radius, w, dw):
    """Dense normalized bin weights of intensity ``v`` and their intensity derivatives.

    Returns the half-open range ``[lo, hi)`` of bins that may be nonzero.
    """
    for j in range(B):
        w[j] = 0.0
        dw[j] = 0.0
    if code == _DELTA:
        m = int(math.floor(v * B))
        if m > B - 1:
            m = B - 1
        if m < 0:
            m = 0
        w[m] = 1.0
        return m, m + 1
    c = v * B - 0.5
    lo = int(math.ceil(c - radius))
    hi = int(math.floor(c + radius)) + 1
    if lo < 0:
        lo = 0
    if hi > B:
        hi = B
    s = 0.0
    sd = 0.0
    for j in range(lo, hi):
        k, dk = _kappa(j - c, code, sigma, scale, shift, radius)
        w[j] = k
        dw[j] = -B * dk
        s += k
        sd += -B * dk
    for j in range(lo, hi):
        k = w[j]
        w[j] = k / s
        dw[j] = (dw[j] * s - k * sd) / (s * s)
    return lo, hi


def _check_unit(name, x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return x


def _check_pair(I, J, B):
    if B < 2:
        raise ValueError(f"bin count must be at least 2, got {B}")
    I = _check_unit("I", I)
    J = _check_unit("J", J)
    if I.shape != J.shape:
        raise ValueError(f"I and J must share a lattice, got {I.shape} and {J.shape}")
    return np.ascontiguousarray(I).ravel(), np.ascontiguousarray(J).ravel()


def bin_weights(v: float, B: int, kernel: ParzenKernel = ParzenKernel()):
    """Normalized weights ``kappa_j(v)`` and derivatives ``omega_j(v)`` over the ``B`` bins."""
    w = np.empty(B)
    dw = np.empty(B)
    _weights(float(v), B, *kernel.params, w, dw)
    return w, dw


def parzen_block_naive(I, B: int, kernel: ParzenKernel = ParzenKernel()) -> np.ndarray:
    """Materialized ``B x N`` block of per-sample bin weights (oracle only)."""
    if B < 1:
        raise ValueError(f"bin count must be positive, got {B}")
    I = _check_unit("I", I).ravel()
    psi = np.empty((B, I.size))
    dw = np.empty(B)
    for k, v in enumerate(I):
        _weights(v, B, *kernel.params, psi[:, k], dw)
    return psi


@dataclass
class JointHistogram:
    """Marginal and joint PMFs over ``B`` bins, estimated from ``n_samples`` voxels.

    ``writes`` counts accumulator updates made while building the histogram.
    """

    B: int
    p_I: np.ndarray
    p_J: np.ndarray
    p_IJ: np.ndarray
    n_samples: int
    writes: int = 0


# ---------------------------------------------------------------------------
# accumulation


@njit(cache=True)
def _accumulate_exact(I, J, B, code, sigma, scale, shift, radius, hI, hJ, hIJ):
    wI = np.empty(B)
    dI = np.empty(B)
    wJ = np.empty(B)
    dJ = np.empty(B)
    writes = 0
    for k in range(I.size):
        _weights(I[k], B, code, sigma, scale, shift, radius, wI, dI)
        _weights(J[k], B, code, sigma, scale, shift, radius, wJ, dJ)
        for m in range(B):
            hI[m] += wI[m]
            hJ[m] += wJ[m]
            for n in range(B):
                hIJ[m, n] += wI[m] * wJ[n]
        writes += 2 * B + B * B
    return writes


@njit(cache=True)
def _accumulate_delta(I, J, B, hI, hJ, hIJ):
    for k in range(I.size):
        m = min(int(math.floor(I[k] * B)), B - 1)
        n = min(int(math.floor(J[k] * B)), B - 1)
        hI[m] += 1.0
        hJ[n] += 1.0
        hIJ[m, n] += 1.0
    return 3 * I.size


def accumulate(I, J, B: int = DEFAULT_BINS, kernel: ParzenKernel = ParzenKernel(), exact: bool = True):
    """Raw (unnormalized) histogram sums ``(h_I, h_J, h_IJ, writes)`` over the local samples.

    The exact path sums kernel weights per voxel; the approximate path counts
    hard-binned samples and defers the kernel to :func:`histogram_from_sums`.
    """
    I, J = _check_pair(I, J, B)
    hI = np.zeros(B)
    hJ = np.zeros(B)
    hIJ = np.zeros((B, B))
    if exact:
        writes = _accumulate_exact(I, J, B, *kernel.params, hI, hJ, hIJ)
    else:
        writes = _accumulate_delta(I, J, B, hI, hJ, hIJ)
    return hI, hJ, hIJ, int(writes)


def kernel_matrix(B: int, kernel: ParzenKernel = ParzenKernel()) -> np.ndarray:
    """``K[m, j]``: weight that a sample sitting on bin center ``b_j`` gives to bin ``m``."""
    K = np.empty((B, B))
    dw = np.empty(B)
    for j in range(B):
        _weights((j + 0.5) / B, B, *kernel.params, K[:, j], dw)
    return K


def histogram_from_sums(hI, hJ, hIJ, n_samples: int, kernel: ParzenKernel = ParzenKernel(),
                        exact: bool = True, writes: int = 0) -> JointHistogram:
    """Normalize raw sums; on the approximate path, smooth the counts with the kernel first."""
    B = len(hI)
    if exact:
        p_I, p_J, p_IJ = hI / n_samples, hJ / n_samples, hIJ / n_samples
    else:
        K = kernel_matrix(B, kernel)
        p_I = K @ hI
        p_J = K @ hJ
        p_IJ = K @ hIJ @ K.T
        p_I /= p_I.sum()
        p_J /= p_J.sum()
        p_IJ /= p_IJ.sum()
    return JointHistogram(B, p_I, p_J, p_IJ, int(n_samples), int(writes))


def mutual_information(h: JointHistogram) -> float:
    """``sum p_IJ log(p_IJ / (p_I p_J))`` with ``0 log 0 = 0``."""
    outer = np.outer(h.p_I, h.p_J)
    mask = h.p_IJ > 0
    return float(np.sum(h.p_IJ[mask] * np.log(h.p_IJ[mask] / outer[mask])))


def mi_forward_exact(I, J, B: int = DEFAULT_BINS, kernel: ParzenKernel = ParzenKernel()):
    hI, hJ, hIJ, writes = accumulate(I, J, B, kernel, exact=True)
    h = histogram_from_sums(hI, hJ, hIJ, np.size(I), kernel, True, writes)
    return mutual_information(h), h


def mi_forward_approx(I, J, B: int = DEFAULT_BINS, kernel: ParzenKernel = ParzenKernel()):
    hI, hJ, hIJ, writes = accumulate(I, J, B, kernel, exact=False)
    h = histogram_from_sums(hI, hJ, hIJ, np.size(I), kernel, False, writes)
    return mutual_information(h), h


# ---------------------------------------------------------------------------
# backward


def histogram_grads(h: JointHistogram, g: float = 1.0):
    """Upstream gradients ``(g_I, g_J, g_IJ)`` of ``g * MI`` with respect to the PMFs."""
    p_IJ = h.p_IJ
    outer = np.outer(h.p_I, h.p_J)
    g_IJ = np.zeros_like(p_IJ)
    mask = p_IJ > 0
    g_IJ[mask] = np.log(p_IJ[mask] / outer[mask]) + 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        g_I = np.where(h.p_I > 0, -p_IJ.sum(axis=1) / h.p_I, 0.0)
        g_J = np.where(h.p_J > 0, -p_IJ.sum(axis=0) / h.p_J, 0.0)
    return g * g_I, g * g_J, g * g_IJ


@njit(cache=True)
def _voxel_grads(I, J, B, code, sigma, scale, shift, radius, g_I, g_J, g_IJ, inv_n, gI, gJ):
    wI = np.empty(B)
    dI = np.empty(B)
    wJ = np.empty(B)
    dJ = np.empty(B)
    for k in range(I.size):
        loI, hiI = _weights(I[k], B, code, sigma, scale, shift, radius, wI, dI)
        loJ, hiJ = _weights(J[k], B, code, sigma, scale, shift, radius, wJ, dJ)
        aI = 0.0
        aJ = 0.0
        for m in range(loI, hiI):
            aI += g_I[m] * dI[m]
        for n in range(loJ, hiJ):
            aJ += g_J[n] * dJ[n]
        for m in range(loI, hiI):
            for n in range(loJ, hiJ):
                gmn = g_IJ[m, n]
                aI += gmn * dI[m] * wJ[n]
                aJ += gmn * wI[m] * dJ[n]
        gI[k] = aI * inv_n
        gJ[k] = aJ * inv_n


def voxel_grads(I, J, hist_grads, B: int, kernel: ParzenKernel = ParzenKernel(),
                n_total: int | None = None):
    """Per-voxel ``(dL/dI, dL/dJ)`` from histogram gradients; ``n_total`` defaults to ``I.size``."""
    shape = np.shape(I)
    I, J = _check_pair(I, J, B)
    g_I, g_J, g_IJ = (np.ascontiguousarray(a, dtype=np.float64) for a in hist_grads)
    if g_I.shape != (B,) or g_J.shape != (B,) or g_IJ.shape != (B, B):
        raise ValueError("histogram gradients do not match the bin count")
    gI = np.empty(I.size)
    gJ = np.empty(J.size)
    n = I.size if n_total is None else n_total
    _voxel_grads(I, J, B, *kernel.params, g_I, g_J, g_IJ, 1.0 / n, gI, gJ)
    return gI.reshape(shape), gJ.reshape(shape)


def mi_backward(g: float, I, J, h: JointHistogram, kernel: ParzenKernel = ParzenKernel()):
    """Gradients ``(dL/dI, dL/dJ)`` given ``g = dL/dMI`` and the forward histogram."""
    if np.shape(I) != np.shape(J):
        raise ValueError(f"I and J must share a lattice, got {np.shape(I)} and {np.shape(J)}")
    if np.size(I) != h.n_samples:
        raise ValueError(f"histogram was built from {h.n_samples} samples, got {np.size(I)}")
    return voxel_grads(I, J, histogram_grads(h, g), h.B, kernel, h.n_samples)
