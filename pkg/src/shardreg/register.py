"""Multi-scale registration: an affine stage followed by a greedy deformable stage.

The moved image is ``M(A x + t + u(x))`` in normalized coordinates. The
deformable stage always runs on a :class:`~shardreg.fabric.WorkerGroup`; a
single worker is the unsharded case. Between scales the host gathers the warp,
upsamples it and re-shards it for the next lattice.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import lncc as _lncc
from . import mi as _mi
from .core import alloc
from .core.adam import AdamState, adam_direction, adam_step
from .core.resample import resample_scale, resample_warp, scaled_dims
from .core.smoothing import gaussian_kernel1d
from .core.types import AffineMap, Volume3, WarpField
from .distops import dist_lncc, dist_mi, dist_mse, gp_convolve, ring_sample, ring_sample_backward
from .fabric import WorkerGroup, gather, shard, shard_specs
from .metrics import dice, hd90_cumulative, inv_dice
from .sampler import (SamplerArgs, fused_sample, fused_sample_backward, sample_materialized,
                      sample_materialized_backward, sample_nearest)

__all__ = [
    "ScaleSchedule", "RegistrationResult", "NumericalAbort", "affine_stage", "deformable_stage",
    "register", "dice", "inv_dice", "hd90_cumulative", "default_affine_schedule",
    "default_deformable_schedule", "warp_image", "warp_labels", "check_sharding",
]

LOSSES = ("mse", "lncc", "mi")
BACKENDS = ("fused", "naive")


class NumericalAbort(RuntimeError):
    """Raised when a loss turns non-finite; ``trace`` holds the losses seen so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class ScaleSchedule:
    """Optimization settings for one stage.

    ``scales`` lists ``(downsample_factor, iterations)`` from coarse to fine;
    a factor of 4 optimizes on a lattice four times smaller per axis.
    ``lr_decay`` selects a cosine decay of the step size within each scale.
    ``backend="naive"`` swaps in the materialized-grid sampler and the
    node-by-node LNCC graph; it runs on a single worker only.
    """

    scales: list = field(default_factory=lambda: [(4, 100), (2, 100), (1, 50)])
    lr: float = 0.5
    sigma_grad: float = 1.0
    sigma_warp: float = 0.5
    loss: str = "lncc"
    window: int = 7
    eps: float = 1e-5
    bins: int = 32
    kernel: str = "gaussian"
    ants_approx: bool = True
    mi_approx: bool = True
    gp_sync: bool = True
    lr_decay: str = "none"
    backend: str = "fused"

    def __post_init__(self):
        self.scales = [(float(f), int(n)) for f, n in self.scales]
        prev = math.inf
        for f, n in self.scales:
            if not f >= 1:
                raise ValueError(f"downsample factors must be >= 1, got {f}")
            if f > prev:
                raise ValueError("downsample factors must not increase toward the native scale")
            if n <= 0:
                raise ValueError(f"iteration counts must be positive, got {n}")
            prev = f
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.sigma_grad < 0 or self.sigma_warp < 0:
            raise ValueError("smoothing sigmas must be non-negative")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if self.bins < 2:
            raise ValueError(f"bin count must be at least 2, got {self.bins}")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr decay {self.lr_decay!r}")
        self.parzen  # validates the kernel name

    @property
    def parzen(self) -> _mi.ParzenKernel:
        return _mi.ParzenKernel(self.kernel)

    def lr_at(self, it: int, iters: int) -> float:
        if self.lr_decay == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * it / iters))
        return self.lr


def default_affine_schedule() -> ScaleSchedule:
    return ScaleSchedule(scales=[(2, 50), (1, 50)], lr=0.01, loss="mi", mi_approx=False, lr_decay="cosine")


def default_deformable_schedule() -> ScaleSchedule:
    return ScaleSchedule()


@dataclass
class RegistrationResult:
    """Outcome of :func:`register`.

    ``traces`` maps a stage name to one loss list per scale. ``peak_alloc_bytes``
    is the largest per-iteration total of instrumented buffers across workers.
    """

    affine: AffineMap
    warp: WarpField
    traces: dict
    wall_time: float
    peak_alloc_bytes: int


# ---------------------------------------------------------------------------
# helpers


def _at_scale(v: Volume3, factor: float) -> Volume3:
    return v if factor == 1 else resample_scale(v, 1.0 / factor)


def _unit(v: np.ndarray) -> np.ndarray:
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        return np.zeros_like(v, dtype=np.float64)
    return (v - lo) / (hi - lo)


def _prepare(F: Volume3, M: Volume3, factor: float, sched: ScaleSchedule):
    Fs = _at_scale(F, factor).data.astype(np.float64)
    Ms = _at_scale(M, factor).data.astype(np.float64)
    if sched.loss == "mi":
        Fs, Ms = _unit(Fs), _unit(Ms)
    return Fs, Ms


def _host_loss(F: np.ndarray, moved: np.ndarray, sched: ScaleSchedule):
    """Single-host loss and its gradient with respect to the moved image."""
    if sched.loss == "mse":
        diff = moved - F
        return float(np.mean(diff * diff)), (2.0 / F.size) * diff
    if sched.loss == "lncc" and sched.backend == "naive":
        loss, _ = _lncc.lncc_forward_naive(F, moved, sched.window, sched.eps)
        _, gM = _lncc.lncc_backward_naive(1.0, F, moved, sched.window, sched.eps)
        return loss, gM
    if sched.loss == "lncc":
        loss, state = _lncc.lncc_forward_fused(F, moved, sched.window, sched.eps)
        _, gM = _lncc.lncc_backward_fused(1.0, state, F, moved, sched.ants_approx)
        return loss, gM
    moved = np.clip(moved, 0.0, 1.0)
    kernel = sched.parzen
    fwd = _mi.mi_forward_approx if sched.mi_approx else _mi.mi_forward_exact
    value, hist = fwd(F, moved, sched.bins, kernel)
    _, gM = _mi.mi_backward(-1.0, F, moved, hist, kernel)
    return -value, gM


def _dist_loss(comm, F: np.ndarray, moved: np.ndarray, n_total: int, sched: ScaleSchedule):
    if sched.loss == "mse":
        return dist_mse(comm, F, moved, n_total)
    if sched.loss == "lncc":
        return dist_lncc(comm, F, moved, n_total, sched.window, sched.eps, sched.ants_approx,
                         sync=sched.gp_sync)
    return dist_mi(comm, F, np.clip(moved, 0.0, 1.0), n_total, sched.bins, sched.parzen,
                   approx=sched.mi_approx)


def _sampler(sched: ScaleSchedule):
    if sched.backend == "naive":
        return sample_materialized, sample_materialized_backward
    return fused_sample, fused_sample_backward


# ---------------------------------------------------------------------------
# stages


def affine_stage(F: Volume3, M: Volume3, schedule: ScaleSchedule | None = None,
                 trace: list | None = None) -> AffineMap:
    """Adam on ``(A, t)`` from the identity, one pass per scale of ``schedule``."""
    sched = schedule or default_affine_schedule()
    A = np.eye(3)
    t = np.zeros(3)
    sample, sample_backward = _sampler(sched)
    for factor, iters in sched.scales:
        Fs, Ms = _prepare(F, M, factor, sched)
        state = AdamState.zeros_like(np.zeros(12))
        losses: list = []
        if trace is not None:
            trace.append(losses)
        for it in range(iters):
            args = SamplerArgs(A, t)
            moved = sample(Ms, None, args, out_dims=Fs.shape)
            loss, gM = _host_loss(Fs, moved, sched)
            if not math.isfinite(loss):
                raise NumericalAbort(f"affine loss became {loss} at iteration {it}", losses)
            losses.append(loss)
            g = sample_backward(gM, Ms, None, args, want=("A", "t"))
            params = np.concatenate([A.ravel(), t])
            grads = np.concatenate([g.gA.ravel(), g.gt])
            params, state = adam_step(params, grads, state, sched.lr_at(it, iters))
            A = params[:9].reshape(3, 3)
            t = params[9:].copy()
    return AffineMap(A, t)


def check_sharding(dims, schedule: ScaleSchedule, H: int) -> None:
    """Raise ``ValueError`` if some scale of ``schedule`` cannot be split across ``H`` workers.

    Every shard must be at least as thick as the widest stencil radius, since
    halos only reach the adjacent neighbor.
    """
    if H < 1:
        raise ValueError(f"shard count must be >= 1, got {H}")
    if schedule.backend == "naive" and H != 1:
        raise ValueError("the naive backend runs on a single worker only")
    if H == 1:
        return
    pad = max(len(gaussian_kernel1d(schedule.sigma_grad)), len(gaussian_kernel1d(schedule.sigma_warp)),
              schedule.window if schedule.loss == "lncc" else 1) // 2
    for factor, _ in schedule.scales:
        scaled = dims if factor == 1 else scaled_dims(dims, 1.0 / factor)
        thinnest = min(s.thickness for s in shard_specs(scaled, H))
        if thinnest < 2 or pad > thinnest:
            raise ValueError(f"scale {factor:g}: shards of {thinnest} planes are too thin for {H} workers")


def _scale_worker(comm, F_h, M_h, u_h, spec, img_specs, A, t, sched: ScaleSchedule, iters: int,
                  voxel_step: np.ndarray):
    n_total = spec.n_total
    kgrad = gaussian_kernel1d(sched.sigma_grad)
    kwarp = gaussian_kernel1d(sched.sigma_warp)
    state = AdamState.zeros_like(u_h)
    losses: list = []
    peak = 0
    for it in range(iters):
        with alloc.track() as counter:
            if sched.backend == "naive":
                args = SamplerArgs(A, t)
                moved = sample_materialized(M_h, u_h, args, F_h.shape)
                loss, g_moving = _host_loss(F_h, moved, sched)
            else:
                moved = ring_sample(comm, u_h, M_h, A, t, spec, img_specs)
                res = _dist_loss(comm, F_h, moved, n_total, sched)
                loss, g_moving = res.loss, res.g_moving
            if not math.isfinite(loss):
                raise NumericalAbort(f"deformable loss became {loss} at iteration {it}", losses)
            losses.append(loss)
            if sched.backend == "naive":
                gu = sample_materialized_backward(g_moving, M_h, u_h, args, want=("u",)).gu
            else:
                gu = ring_sample_backward(comm, g_moving, M_h, u_h, A, t, spec, img_specs,
                                          want=("u",)).gu
            if sched.sigma_grad > 0:
                gu = gp_convolve(comm, gu, kgrad, normalized=True, sync=sched.gp_sync)
            direction, state = adam_direction(gu, state)
            # cap the largest displacement change at lr voxels
            biggest = comm.allreduce(float(np.abs(direction).max(initial=0.0)), op="max")
            u_h = u_h - (sched.lr_at(it, iters) / max(biggest, 1.0)) * direction * voxel_step
            if sched.sigma_warp > 0:
                u_h = gp_convolve(comm, u_h, kwarp, normalized=True, sync=sched.gp_sync)
        peak = max(peak, counter.total_bytes)
    return u_h, losses, peak


def deformable_stage(F: Volume3, M: Volume3, A0=None, t0=None, schedule: ScaleSchedule | None = None,
                     H: int = 1, trace: list | None = None, stats: dict | None = None) -> WarpField:
    """Greedy displacement optimization on ``H`` workers; returns the warp on ``F``'s lattice.

    Each iteration samples the moving image, takes the loss gradient back to
    the warp, smooths it, takes a normalized Adam step and smooths the warp.
    """
    sched = schedule or default_deformable_schedule()
    check_sharding(F.dims, sched, H)
    A = np.eye(3) if A0 is None else np.asarray(A0, dtype=np.float64)
    t = np.zeros(3) if t0 is None else np.asarray(t0, dtype=np.float64)
    u = None
    peak = 0
    for factor, iters in sched.scales:
        Fs, Ms = _prepare(F, M, factor, sched)
        dims = Fs.shape
        u = np.zeros(dims + (3,)) if u is None else resample_warp(WarpField(u), dims).data
        F_sh, specs = shard(Fs, H)
        M_sh, img_specs = shard(Ms, H)
        u_sh, _ = shard(u, H)
        voxel_step = np.array([2.0 / (n - 1) if n > 1 else 0.0 for n in dims])
        group = WorkerGroup(H)
        out = group.run(_scale_worker, [
            (F_sh[r], M_sh[r], u_sh[r], specs[r], img_specs, A, t, sched, iters, voxel_step)
            for r in range(H)
        ])
        u = gather([o[0] for o in out])
        if trace is not None:
            trace.append(out[0][1])
        peak = max([peak] + [o[2] for o in out])
    if u is None:
        u = np.zeros(F.dims + (3,))
    if u.shape[:3] != F.dims:
        u = resample_warp(WarpField(u), F.dims).data
    if stats is not None:
        stats["peak_alloc_bytes"] = peak
    return WarpField(u)


def register(F: Volume3, M: Volume3, affine: ScaleSchedule | None = None,
             deformable: ScaleSchedule | None = None, H: int = 1) -> RegistrationResult:
    """Affine then deformable registration of ``M`` onto ``F``."""
    start = time.perf_counter()
    aff_trace: list = []
    def_trace: list = []
    stats: dict = {}
    amap = affine_stage(F, M, affine if affine is not None else default_affine_schedule(), aff_trace)
    warp = deformable_stage(F, M, amap.matrix, amap.translation, deformable, H, def_trace, stats)
    return RegistrationResult(amap, warp, {"affine": aff_trace, "deformable": def_trace},
                              time.perf_counter() - start, stats.get("peak_alloc_bytes", 0))


def warp_image(M, result: RegistrationResult, out_dims=None) -> np.ndarray:
    args = SamplerArgs(result.affine.matrix, result.affine.translation)
    data = M.data if hasattr(M, "data") else np.asarray(M)
    return fused_sample(data.astype(np.float64), result.warp.data, args, out_dims)


def warp_labels(L, result: RegistrationResult) -> np.ndarray:
    args = SamplerArgs(result.affine.matrix, result.affine.translation)
    data = L.data if hasattr(L, "data") else np.asarray(L)
    return sample_nearest(data, result.warp.data, args)
