"""Sharded convolution, ring sampling and losses over a :class:`~shardreg.fabric.Comm`.

Every function here is a collective: all ranks of the group must call it
with matching arguments. Shards are last-axis slabs described by
:class:`~shardreg.fabric.ShardSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import lncc as _lncc
from . import mi as _mi
from .core.smoothing import box_kernel1d
from .fabric import SHARD_AXIS, Comm, HaloBlock, ShardSpec, shard_specs
from .sampler import SamplerArgs, fused_sample, fused_sample_backward


# ---------------------------------------------------------------------------
# grid-parallel convolution


def _axis_weight(n: int, kernel: np.ndarray) -> np.ndarray:
    return correlate1d(np.ones(n), kernel, mode="constant", cval=0.0)


def gp_convolve(comm: Comm, data: np.ndarray, kernel: np.ndarray, normalized: bool = False,
                sync: bool = True) -> np.ndarray:
    """Separable zero-padded convolution of a shard, exact across shard boundaries.

    Neighbor planes are fetched with a halo exchange before filtering and
    cropped afterwards. ``normalized`` divides by the kernel mass inside the
    global domain. ``sync=False`` filters each shard in isolation, which is
    wrong within ``len(kernel) // 2`` planes of an internal boundary.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or len(kernel) % 2 == 0:
        raise ValueError(f"kernel must be 1-D with odd length, got shape {kernel.shape}")
    pad = len(kernel) // 2
    hb = comm.halo_exchange(data, pad) if sync else HaloBlock(data, 0, 0)
    res = hb.data
    if not (len(kernel) == 1 and kernel[0] == 1.0):
        for ax in range(3):
            res = correlate1d(res, kernel, axis=ax, mode="constant", cval=0.0)
    else:
        res = res.copy()
    res = hb.crop(res)
    if normalized:
        shape = hb.data.shape
        den = np.ones(res.shape[:3])
        for ax in range(3):
            w = _axis_weight(shape[ax], kernel)
            if ax == SHARD_AXIS:
                w = w[hb.left:shape[ax] - hb.right]
            view = [1, 1, 1]
            view[ax] = len(w)
            den = den * w.reshape(view)
        if res.ndim == 4:
            den = den[..., None]
        res = res / den
    return res


# ---------------------------------------------------------------------------
# ring sampler


@dataclass(frozen=True)
class ShardRescale:
    """Maps global normalized coordinates inside a source shard onto ``[-1, 1]``.

    ``S * x_min + t == -1`` and ``S * x_max + t == 1`` per axis.
    """

    S: np.ndarray
    t: np.ndarray


def shard_rescale(spec: ShardSpec) -> ShardRescale:
    S = np.ones(3)
    t = np.zeros(3)
    x_min = spec.bounds.x_min
    x_max = spec.bounds.x_max
    for ax in range(3):
        if x_max[ax] != x_min[ax]:
            S[ax] = 2.0 / (x_max[ax] - x_min[ax])
            t[ax] = -1.0 - S[ax] * x_min[ax]
        elif spec.local_dims[ax] == 1 and spec.dims[ax] > 1:
            raise ValueError(
                f"rank {spec.rank} holds a single plane on axis {ax}; ring sampling needs at least 2")
    return ShardRescale(S, t)


def _step_args(A, t, rescale: ShardRescale, out_spec: ShardSpec) -> SamplerArgs:
    A = np.asarray(A, dtype=np.float64).reshape(3, 3)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    S = rescale.S
    return SamplerArgs(S[:, None] * A, S * t + rescale.t, S, out_spec.bounds)


def _img_specs(out_spec: ShardSpec, img_specs):
    if img_specs is None:
        return shard_specs(out_spec.dims, out_spec.size)
    return list(img_specs)


def ring_sample(comm: Comm, u: np.ndarray | None, M_local: np.ndarray, A, t, out_spec: ShardSpec,
                img_specs: Sequence[ShardSpec] | None = None, trace: list | None = None) -> np.ndarray:
    """Sample the sharded moving image at ``A x + t + u(x)`` for this rank's output slab.

    The moving shards travel around the ring; each step adds the contribution of
    one source shard. Zero padding makes samples outside a shard vanish, so the
    sum over steps is the global trilinear interpolation. ``trace`` (if given)
    receives ``(source_rank, partial_norm)`` per step.
    """
    specs = _img_specs(out_spec, img_specs)
    H = comm.size
    out_dims = out_spec.local_dims
    acc = np.zeros(out_dims, dtype=np.result_type(M_local.dtype, np.float64))
    for h in range(H):
        J = comm.ring_send_recv(M_local, h)
        src = (comm.rank - h) % H
        if h:
            comm.hold(J)
        args = _step_args(A, t, shard_rescale(specs[src]), out_spec)
        part = fused_sample(J, u, args, out_dims)
        if trace is not None:
            trace.append((src, float(np.linalg.norm(part))))
        acc += part
        if h:
            comm.release(J)
    return acc


class RingGrads(NamedTuple):
    gu: np.ndarray | None
    gA: np.ndarray | None
    gt: np.ndarray | None
    gM: np.ndarray | None


def ring_sample_backward(comm: Comm, g: np.ndarray, M_local: np.ndarray, u: np.ndarray | None, A, t,
                         out_spec: ShardSpec, img_specs: Sequence[ShardSpec] | None = None,
                         want: Sequence[str] = ("u", "A", "t", "M")) -> RingGrads:
    """Adjoint of :func:`ring_sample`.

    Image gradients computed against a visiting shard are sent back to its owner
    with the reverse ring offset. ``gA`` and ``gt`` are summed over ranks.
    """
    want = set(want)
    specs = _img_specs(out_spec, img_specs)
    H = comm.size
    sampler_want = [w for w in ("u", "A", "t") if w in want]
    if "M" in want:
        sampler_want.append("I")
    has_u = u is not None
    gu = np.zeros(u.shape) if ("u" in want and has_u) else None
    gA = np.zeros((3, 3)) if "A" in want else None
    gt = np.zeros(3) if "t" in want else None
    gM = np.zeros(M_local.shape) if "M" in want else None
    for h in range(H):
        J = comm.ring_send_recv(M_local, h)
        src = (comm.rank - h) % H
        if h:
            comm.hold(J)
        rs = shard_rescale(specs[src])
        args = _step_args(A, t, rs, out_spec)
        grads = fused_sample_backward(g, J, u, args, want=tuple(sampler_want))
        if gu is not None:
            gu += grads.gu
        if gA is not None:
            gA += rs.S[:, None] * grads.gA
        if gt is not None:
            gt += rs.S * grads.gt
        if h:
            comm.release(J)
        if gM is not None:
            back = comm.ring_send_recv(grads.gI, -h)
            gM += back
    if gA is not None:
        gA = comm.allreduce(gA)
    if gt is not None:
        gt = comm.allreduce(gt)
    return RingGrads(gu, gA, gt, gM)


# ---------------------------------------------------------------------------
# losses


class DistLoss(NamedTuple):
    loss: float
    g_fixed: np.ndarray | None
    g_moving: np.ndarray | None


def _check_aligned(F, M):
    if np.shape(F) != np.shape(M):
        raise ValueError(f"fixed and moving shards differ: {np.shape(F)} vs {np.shape(M)}")


def dist_mse(comm: Comm, F: np.ndarray, M: np.ndarray, n_total: int) -> DistLoss:
    """``mean((M - F)^2)`` over the global lattice."""
    _check_aligned(F, M)
    diff = M - F
    loss = comm.allreduce(float(np.sum(diff * diff))) / n_total
    g = (2.0 / n_total) * diff
    return DistLoss(loss, -g, g)


def lncc_conv(comm: Comm, window: int, sync: bool = True):
    """Box convolution of a ``(c, n0, n1, n2)`` state block with halo synchronization."""
    k = box_kernel1d(window)

    def conv(state: np.ndarray) -> None:
        if window == 1:
            return
        for c in range(state.shape[0]):
            state[c] = gp_convolve(comm, state[c], k, sync=sync)

    return conv


def dist_lncc(comm: Comm, F: np.ndarray, M: np.ndarray, n_total: int,
              window: int = _lncc.DEFAULT_WINDOW, eps: float = _lncc.DEFAULT_EPS,
              use_ants_approx: bool = False, sync: bool = True) -> DistLoss:
    """``1 - mean(n)`` with window statistics exact across shard boundaries."""
    _check_aligned(F, M)
    conv = lncc_conv(comm, window, sync)
    state = _lncc.lncc_state(F, M, window, eps, conv=conv, n_total=n_total)
    loss = 1.0 - comm.allreduce(_lncc.lncc_sum(state)) / n_total
    gF, gM = _lncc.lncc_backward_fused(1.0, state, F, M, use_ants_approx, conv=conv)
    return DistLoss(loss, gF, gM)


def dist_mi(comm: Comm, F: np.ndarray, M: np.ndarray, n_total: int, bins: int = _mi.DEFAULT_BINS,
            kernel: _mi.ParzenKernel = _mi.ParzenKernel(), approx: bool = True) -> DistLoss:
    """``-MI`` from per-shard histograms averaged with weights ``N_h / N``.

    One reduction of ``B^2 + 2B`` numbers per rank builds the global histogram,
    which every rank then holds identically. Intensities must already lie in
    ``[0, 1]``. Gradients use the exact kernel weights in either mode.
    """
    _check_aligned(F, M)
    n_local = int(np.size(F))
    hI, hJ, hIJ, writes = _mi.accumulate(F, M, bins, kernel, exact=not approx)
    local = np.concatenate([hI, hJ, hIJ.ravel()]) / n_local
    merged = comm.allreduce(local, op="weighted-sum", weight=n_local / n_total) * n_total
    B = bins
    hist = _mi.histogram_from_sums(merged[:B], merged[B:2 * B], merged[2 * B:].reshape(B, B),
                                   n_total, kernel, exact=not approx, writes=writes)
    value = _mi.mutual_information(hist)
    gF, gM = _mi.voxel_grads(F, M, _mi.histogram_grads(hist, -1.0), B, kernel, n_total)
    return DistLoss(-value, gF, gM)
