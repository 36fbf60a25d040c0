"""Local normalized cross-correlation.

With window means ``mu`` taken by a normalized box filter ``W`` (zero padding
at the volume edges),

    A = mu(FM) - mu(F) mu(M),  B = mu(F^2) - mu(F)^2,  C = mu(M^2) - mu(M)^2
    n = A^2 / (B C + eps),     loss = 1 - mean(n)

The fused path keeps a single five-channel state ``W * (F, M, F^2, M^2, FM)``.
Its backward pass overwrites that state with the gamma family

    D      = B C + eps
    gamma  = 2 g A / D                  (g = dL/dn)
    g_AB   = gamma A C / D              g_AC  = gamma A B / D
    g_FM   = gamma (mu(F) A C / D - mu(M))
    g_MF   = gamma (mu(M) A B / D - mu(F))

convolves it with ``W`` (skipped under the ANTs approximation) and finishes with

    dL/dF = M (W*gamma) - F (W*g_AB) + W*g_FM
    dL/dM = F (W*gamma) - M (W*g_AC) + W*g_MF

With ``eps = 0`` the ratios ``A C / D`` reduce to ``A / B``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit
from scipy.ndimage import correlate1d

from .core import alloc
from .core.smoothing import box_kernel1d, convolve_separable

DEFAULT_WINDOW = 7
DEFAULT_EPS = 1e-5

Conv = Callable[[np.ndarray], None]


def _validate(F, M, window):
    F = np.asarray(F)
    M = np.asarray(M)
    if F.shape != M.shape or F.ndim != 3:
        raise ValueError(f"F and M must be 3-D on one lattice, got {F.shape} and {M.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    return F, M


# ---------------------------------------------------------------------------
# naive graph


def lncc_forward_naive(F, M, window: int = DEFAULT_WINDOW, eps: float = DEFAULT_EPS):
    """Reference LNCC that materializes every node of the computation graph.

    Returns ``(loss, intermediates)``; ``intermediates["n"]`` is the per-voxel map.
    """
    F, M = _validate(F, M, window)
    k = box_kernel1d(window)
    rec = alloc.record
    F2 = rec("F2", F * F)
    M2 = rec("M2", M * M)
    FM = rec("FM", F * M)
    pre = rec("state_pre", np.stack([F, M, F2, M2, FM]))
    state = rec("state", np.stack([convolve_separable(c, k) for c in pre]))
    mu_F, mu_M = state[0], state[1]
    mu_F_sq = rec("mu_F_sq", mu_F * mu_F)
    mu_M_sq = rec("mu_M_sq", mu_M * mu_M)
    mu_FM = rec("mu_F_mu_M", mu_F * mu_M)
    var_F = rec("var_F", state[2] - mu_F_sq)
    var_M = rec("var_M", state[3] - mu_M_sq)
    cov = rec("cov", state[4] - mu_FM)
    var_prod = rec("var_prod", var_F * var_M)
    den = rec("den", var_prod + eps)
    cov_sq = rec("cov_sq", cov * cov)
    n = rec("n", cov_sq / den)
    loss = 1.0 - float(n.mean())
    inter = dict(F2=F2, M2=M2, FM=FM, state=state, mu_F_sq=mu_F_sq, mu_M_sq=mu_M_sq,
                 mu_F_mu_M=mu_FM, var_F=var_F, var_M=var_M, cov=cov, var_prod=var_prod,
                 den=den, cov_sq=cov_sq, n=n)
    return loss, inter


def lncc_backward_naive(g: float, F, M, window: int = DEFAULT_WINDOW, eps: float = DEFAULT_EPS):
    """Reverse-mode pass through the naive graph, one node at a time."""
    F, M = _validate(F, M, window)
    _, it = lncc_forward_naive(F, M, window, eps)
    k = box_kernel1d(window)
    st = it["state"]
    mu_F, mu_M = st[0], st[1]
    d_n = np.full(F.shape, -g / F.size)
    d_cov_sq = d_n / it["den"]
    d_den = -d_n * it["cov_sq"] / it["den"] ** 2
    d_var_F = d_den * it["var_M"]
    d_var_M = d_den * it["var_F"]
    d_cov = d_cov_sq * 2.0 * it["cov"]
    d_state = np.stack([
        -2.0 * mu_F * d_var_F - mu_M * d_cov,
        -2.0 * mu_M * d_var_M - mu_F * d_cov,
        d_var_F,
        d_var_M,
        d_cov,
    ])
    # W is symmetric and zero padded, so it is its own adjoint.
    d_pre = np.stack([convolve_separable(c, k) for c in d_state])
    dF = d_pre[0] + 2.0 * F * d_pre[2] + M * d_pre[4]
    dM = d_pre[1] + 2.0 * M * d_pre[3] + F * d_pre[4]
    return dF, dM


# ---------------------------------------------------------------------------
# fused path


@dataclass
class LnccState:
    """Five convolved channels ``(mu_F, mu_M, mu_F2, mu_M2, mu_FM)`` on F's lattice.

    ``n_total`` is the voxel count the loss is averaged over (the global count
    when the state belongs to one shard). The backward pass consumes the state.
    """

    data: np.ndarray
    window: int
    eps: float
    n_total: int
    consumed: bool = False


@njit(cache=True)
def _fill_state(F, M, state):
    n0, n1, n2 = F.shape
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                f = F[i, j, k]
                m = M[i, j, k]
                state[0, i, j, k] = f
                state[1, i, j, k] = m
                state[2, i, j, k] = f * f
                state[3, i, j, k] = m * m
                state[4, i, j, k] = f * m


@njit(cache=True)
def _ncc_sum(state, eps):
    _, n0, n1, n2 = state.shape
    total = 0.0
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                mf = state[0, i, j, k]
                mm = state[1, i, j, k]
                a = state[4, i, j, k] - mf * mm
                b = state[2, i, j, k] - mf * mf
                c = state[3, i, j, k] - mm * mm
                total += a * a / (b * c + eps)
    return total


@njit(cache=True)
def _ncc_map(state, eps, out):
    _, n0, n1, n2 = state.shape
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                mf = state[0, i, j, k]
                mm = state[1, i, j, k]
                a = state[4, i, j, k] - mf * mm
                b = state[2, i, j, k] - mf * mf
                c = state[3, i, j, k] - mm * mm
                out[i, j, k] = a * a / (b * c + eps)


@njit(cache=True)
def _gamma_inplace(state, eps, g_n):
    _, n0, n1, n2 = state.shape
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                mf = state[0, i, j, k]
                mm = state[1, i, j, k]
                a = state[4, i, j, k] - mf * mm
                b = state[2, i, j, k] - mf * mf
                c = state[3, i, j, k] - mm * mm
                d = b * c + eps
                gam = 2.0 * g_n * a / d
                rab = a * c / d
                rac = a * b / d
                state[0, i, j, k] = gam
                state[1, i, j, k] = gam * rab
                state[2, i, j, k] = gam * rac
                state[3, i, j, k] = gam * (mf * rab - mm)
                state[4, i, j, k] = gam * (mm * rac - mf)


@njit(cache=True)
def _combine(state, F, M, gF, gM):
    n0, n1, n2 = F.shape
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                f = F[i, j, k]
                m = M[i, j, k]
                gam = state[0, i, j, k]
                gF[i, j, k] = m * gam - f * state[1, i, j, k] + state[3, i, j, k]
                gM[i, j, k] = f * gam - m * state[2, i, j, k] + state[4, i, j, k]


def box_convolve_inplace(state: np.ndarray, window: int) -> None:
    """Convolve each channel of a ``(c, n0, n1, n2)`` block in place with the box filter.

    Uses one transient lattice-sized buffer for the separable passes.
    """
    if window == 1:
        return
    k = box_kernel1d(window)
    tmp = alloc.empty(state.shape[1:], state.dtype, label="conv_transient", persistent=False)
    for c in range(state.shape[0]):
        ch = state[c]
        correlate1d(ch, k, axis=0, output=tmp, mode="constant", cval=0.0)
        correlate1d(tmp, k, axis=1, output=ch, mode="constant", cval=0.0)
        correlate1d(ch, k, axis=2, output=tmp, mode="constant", cval=0.0)
        ch[...] = tmp


def lncc_state(F, M, window: int = DEFAULT_WINDOW, eps: float = DEFAULT_EPS,
               conv: Conv | None = None, n_total: int | None = None) -> LnccState:
    """Build and convolve the five-channel state in one read of ``F`` and ``M``.

    ``conv`` replaces the local box convolution (it must convolve the block in
    place); the distributed path passes a halo-synchronized one.
    """
    F, M = _validate(F, M, window)
    dt = np.result_type(F.dtype, M.dtype)
    state = alloc.empty((5,) + F.shape, dt, label="lncc_state")
    _fill_state(F.astype(dt, copy=False), M.astype(dt, copy=False), state)
    if conv is None:
        box_convolve_inplace(state, window)
    else:
        conv(state)
    return LnccState(state, window, eps, F.size if n_total is None else n_total)


def lncc_sum(state: LnccState) -> float:
    """Sum of the per-voxel correlations ``n`` over the state's lattice."""
    if state.consumed:
        raise ValueError("LNCC state was consumed by a backward pass")
    return float(_ncc_sum(state.data, state.eps))


def lncc_map(state: LnccState) -> np.ndarray:
    if state.consumed:
        raise ValueError("LNCC state was consumed by a backward pass")
    out = np.empty(state.data.shape[1:], state.data.dtype)
    _ncc_map(state.data, state.eps, out)
    return out


def lncc_forward_fused(F, M, window: int = DEFAULT_WINDOW, eps: float = DEFAULT_EPS):
    """Fused LNCC forward. Returns ``(loss, state)`` with ``loss = 1 - mean(n)``."""
    state = lncc_state(F, M, window, eps)
    return 1.0 - lncc_sum(state) / state.n_total, state


def lncc_backward_fused(g: float, state: LnccState, F, M, use_ants_approx: bool = False,
                        conv: Conv | None = None):
    """Gradients ``(dL/dF, dL/dM)`` for upstream ``g = dL/dloss``.

    Overwrites ``state`` with the gamma family. With ``use_ants_approx`` the
    gamma tensors are used without the second convolution.
    """
    F, M = _validate(F, M, state.window)
    if state.consumed:
        raise ValueError("LNCC state was consumed by a backward pass")
    if state.data.shape[1:] != F.shape:
        raise ValueError(f"state lattice {state.data.shape[1:]} does not match {F.shape}")
    dt = state.data.dtype
    _gamma_inplace(state.data, state.eps, -float(g) / state.n_total)
    state.consumed = True
    if not use_ants_approx:
        if conv is None:
            box_convolve_inplace(state.data, state.window)
        else:
            conv(state.data)
    gF = np.empty(F.shape, dt)
    gM = np.empty(F.shape, dt)
    _combine(state.data, F.astype(dt, copy=False), M.astype(dt, copy=False), gF, gM)
    return gF, gM
