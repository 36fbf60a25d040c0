"""Composite implicit grid sampler.

``fused_sample`` evaluates ``I(A x + t + S u(x))`` with trilinear interpolation
and zero padding, where ``x`` runs over an identity grid that is never stored:
each output voxel derives its coordinate from the lattice bounds. The only
array allocated is the output. ``sample_materialized`` is the reference path
that builds the identity, affine and warped grids explicitly.

Cell assignment uses ``floor`` everywhere, with out-of-range corners reading
zero, so at a lattice point the derivative is always the one-sided difference
toward the next voxel. A coordinate contributes when ``-1 <= p < n`` in voxel
units; this half-open range lets the pieces of a sharded volume sum to the
unsharded result on shard boundaries. Coordinates within ``SNAP_TOL`` voxels of a lattice point are
snapped onto it first. Interpolation has a kink there, so without snapping the
one-sided derivative would depend on last-bit round-off, and sharded and
unsharded evaluation of the same point could disagree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

from .core import alloc
from .core.types import DomainBounds, WarpField

SNAP_TOL = 1e-10


@dataclass
class SamplerArgs:
    A: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    S: np.ndarray = field(default_factory=lambda: np.ones(3))
    bounds: DomainBounds = field(default_factory=DomainBounds.full)

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64).reshape(3, 3)
        self.t = np.array(self.t, dtype=np.float64).reshape(3)
        S = np.asarray(self.S, dtype=np.float64)
        if S.shape == (3, 3):
            if np.any(S != np.diag(np.diag(S))):
                raise ValueError("S must be diagonal")
            S = np.diag(S)
        self.S = np.array(S, dtype=np.float64).reshape(3)
        if np.any(self.S <= 0):
            raise ValueError(f"S diagonal entries must be positive, got {self.S}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.t))):
            raise ValueError("A and t must be finite")

    def lattice(self, dims):
        """Per-axis first coordinate and step of the implicit identity grid."""
        lo = self.bounds.x_min.copy()
        step = np.zeros(3)
        for ax in range(3):
            if dims[ax] > 1:
                step[ax] = (self.bounds.x_max[ax] - self.bounds.x_min[ax]) / (dims[ax] - 1)
        return lo, step


class SamplerGrads(NamedTuple):
    gI: np.ndarray | None
    gu: np.ndarray | None
    gA: np.ndarray | None
    gt: np.ndarray | None


_NO_WARP = np.zeros((1, 1, 1, 3))


def _unwrap(x):
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else np.asarray(x)


def _check(img, u, out_dims=None):
    if img.ndim != 3:
        raise ValueError(f"image must be 3-D, got shape {img.shape}")
    if u is not None:
        if u.ndim != 4 or u.shape[-1] != 3:
            raise ValueError(f"warp must have shape (n0, n1, n2, 3), got {u.shape}")
        if out_dims is not None and tuple(u.shape[:3]) != tuple(out_dims):
            raise ValueError(f"warp lattice {u.shape[:3]} does not match {out_dims}")
        return tuple(u.shape[:3])
    return tuple(out_dims) if out_dims is not None else tuple(img.shape)


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True, inline="always")
def _cell(p, n):
    """Lower corner index and fractional offset; index -2 means no contribution."""
    r = math.floor(p + 0.5)
    if abs(p - r) < SNAP_TOL:
        p = r
    if not (p >= -1.0 and p < n):
        return -2, 0.0
    i0 = int(math.floor(p))
    return i0, p - i0


@njit(cache=True)
def _forward_kernel(img, u, has_u, A, t, S, lo, step, out):
    n0, n1, n2 = out.shape
    m0, m1, m2 = img.shape
    h0 = 0.5 * (m0 - 1)
    h1 = 0.5 * (m1 - 1)
    h2 = 0.5 * (m2 - 1)
    for i in range(n0):
        x0 = lo[0] + step[0] * i
        for j in range(n1):
            x1 = lo[1] + step[1] * j
            for k in range(n2):
                x2 = lo[2] + step[2] * k
                s0 = A[0, 0] * x0 + A[0, 1] * x1 + A[0, 2] * x2 + t[0]
                s1 = A[1, 0] * x0 + A[1, 1] * x1 + A[1, 2] * x2 + t[1]
                s2 = A[2, 0] * x0 + A[2, 1] * x1 + A[2, 2] * x2 + t[2]
                if has_u:
                    s0 += S[0] * u[i, j, k, 0]
                    s1 += S[1] * u[i, j, k, 1]
                    s2 += S[2] * u[i, j, k, 2]
                a0, f0 = _cell((s0 + 1.0) * h0, m0)
                a1, f1 = _cell((s1 + 1.0) * h1, m1)
                a2, f2 = _cell((s2 + 1.0) * h2, m2)
                val = 0.0
                if a0 != -2 and a1 != -2 and a2 != -2:
                    for c0 in range(2):
                        ia = a0 + c0
                        if ia < 0 or ia >= m0:
                            continue
                        w0 = f0 if c0 == 1 else 1.0 - f0
                        for c1 in range(2):
                            ib = a1 + c1
                            if ib < 0 or ib >= m1:
                                continue
                            w1 = f1 if c1 == 1 else 1.0 - f1
                            for c2 in range(2):
                                ic = a2 + c2
                                if ic < 0 or ic >= m2:
                                    continue
                                w2 = f2 if c2 == 1 else 1.0 - f2
                                val += w0 * w1 * w2 * img[ia, ib, ic]
                out[i, j, k] = val


@njit(cache=True)
def _backward_kernel(g, img, u, has_u, A, t, S, lo, step,
                     want_I, want_u, want_A, want_t, gI, gu, gA, gt):
    n0, n1, n2 = g.shape
    m0, m1, m2 = img.shape
    h0 = 0.5 * (m0 - 1)
    h1 = 0.5 * (m1 - 1)
    h2 = 0.5 * (m2 - 1)
    ga00 = ga01 = ga02 = ga10 = ga11 = ga12 = ga20 = ga21 = ga22 = 0.0
    gt0 = gt1 = gt2 = 0.0
    for i in range(n0):
        x0 = lo[0] + step[0] * i
        for j in range(n1):
            x1 = lo[1] + step[1] * j
            for k in range(n2):
                gv = g[i, j, k]
                if gv == 0.0:
                    continue
                x2 = lo[2] + step[2] * k
                s0 = A[0, 0] * x0 + A[0, 1] * x1 + A[0, 2] * x2 + t[0]
                s1 = A[1, 0] * x0 + A[1, 1] * x1 + A[1, 2] * x2 + t[1]
                s2 = A[2, 0] * x0 + A[2, 1] * x1 + A[2, 2] * x2 + t[2]
                if has_u:
                    s0 += S[0] * u[i, j, k, 0]
                    s1 += S[1] * u[i, j, k, 1]
                    s2 += S[2] * u[i, j, k, 2]
                a0, f0 = _cell((s0 + 1.0) * h0, m0)
                a1, f1 = _cell((s1 + 1.0) * h1, m1)
                a2, f2 = _cell((s2 + 1.0) * h2, m2)
                if a0 == -2 or a1 == -2 or a2 == -2:
                    continue
                d0 = 0.0
                d1 = 0.0
                d2 = 0.0
                for c0 in range(2):
                    ia = a0 + c0
                    if ia < 0 or ia >= m0:
                        continue
                    w0 = f0 if c0 == 1 else 1.0 - f0
                    e0 = 1.0 if c0 == 1 else -1.0
                    for c1 in range(2):
                        ib = a1 + c1
                        if ib < 0 or ib >= m1:
                            continue
                        w1 = f1 if c1 == 1 else 1.0 - f1
                        e1 = 1.0 if c1 == 1 else -1.0
                        for c2 in range(2):
                            ic = a2 + c2
                            if ic < 0 or ic >= m2:
                                continue
                            w2 = f2 if c2 == 1 else 1.0 - f2
                            e2 = 1.0 if c2 == 1 else -1.0
                            v = img[ia, ib, ic]
                            d0 += e0 * w1 * w2 * v
                            d1 += w0 * e1 * w2 * v
                            d2 += w0 * w1 * e2 * v
                            if want_I:
                                gI[ia, ib, ic] += w0 * w1 * w2 * gv
                # d(value)/d(normalized source coordinate), times upstream gradient
                q0 = d0 * h0 * gv
                q1 = d1 * h1 * gv
                q2 = d2 * h2 * gv
                if want_u:
                    gu[i, j, k, 0] += S[0] * q0
                    gu[i, j, k, 1] += S[1] * q1
                    gu[i, j, k, 2] += S[2] * q2
                if want_A:
                    ga00 += q0 * x0
                    ga01 += q0 * x1
                    ga02 += q0 * x2
                    ga10 += q1 * x0
                    ga11 += q1 * x1
                    ga12 += q1 * x2
                    ga20 += q2 * x0
                    ga21 += q2 * x1
                    ga22 += q2 * x2
                if want_t:
                    gt0 += q0
                    gt1 += q1
                    gt2 += q2
    gA[0, 0] += ga00
    gA[0, 1] += ga01
    gA[0, 2] += ga02
    gA[1, 0] += ga10
    gA[1, 1] += ga11
    gA[1, 2] += ga12
    gA[2, 0] += ga20
    gA[2, 1] += ga21
    gA[2, 2] += ga22
    gt[0] += gt0
    gt[1] += gt1
    gt[2] += gt2


@njit(cache=True)
def _nearest_kernel(img, u, has_u, A, t, S, lo, step, out):
    n0, n1, n2 = out.shape
    m0, m1, m2 = img.shape
    h0 = 0.5 * (m0 - 1)
    h1 = 0.5 * (m1 - 1)
    h2 = 0.5 * (m2 - 1)
    for i in range(n0):
        x0 = lo[0] + step[0] * i
        for j in range(n1):
            x1 = lo[1] + step[1] * j
            for k in range(n2):
                x2 = lo[2] + step[2] * k
                s0 = A[0, 0] * x0 + A[0, 1] * x1 + A[0, 2] * x2 + t[0]
                s1 = A[1, 0] * x0 + A[1, 1] * x1 + A[1, 2] * x2 + t[1]
                s2 = A[2, 0] * x0 + A[2, 1] * x1 + A[2, 2] * x2 + t[2]
                if has_u:
                    s0 += S[0] * u[i, j, k, 0]
                    s1 += S[1] * u[i, j, k, 1]
                    s2 += S[2] * u[i, j, k, 2]
                p0 = (s0 + 1.0) * h0 + 0.5
                p1 = (s1 + 1.0) * h1 + 0.5
                p2 = (s2 + 1.0) * h2 + 0.5
                if p0 >= 0.0 and p0 < m0 and p1 >= 0.0 and p1 < m1 and p2 >= 0.0 and p2 < m2:
                    out[i, j, k] = img[int(p0), int(p1), int(p2)]


# ---------------------------------------------------------------------------
# public API


def fused_sample(I, u=None, args: SamplerArgs | None = None, out_dims=None) -> np.ndarray:
    """Sample ``I`` at ``A x + t + S u(x)`` for every voxel ``x`` of the output lattice.

    The output lattice is ``u``'s when a warp is given, otherwise ``out_dims``
    (default: ``I``'s own lattice). Returns a new array of the image dtype.
    """
    img = _unwrap(I)
    warp = None if u is None else _unwrap(u)
    args = args or SamplerArgs()
    dims = _check(img, warp, out_dims)
    lo, step = args.lattice(dims)
    out = alloc.empty(dims, dtype=img.dtype, label="sampler_output")
    _forward_kernel(img, warp if warp is not None else _NO_WARP.astype(img.dtype),
                    warp is not None, args.A, args.t, args.S, lo, step, out)
    return out


def fused_sample_backward(g, I, u=None, args: SamplerArgs | None = None,
                          want=("I", "u", "A", "t")) -> SamplerGrads:
    """Gradients of ``sum(g * fused_sample(I, u, args))`` with respect to the requested inputs.

    ``want`` is any subset of ``{"I", "u", "A", "t"}``; unrequested entries are
    ``None``. The warp gradient already includes the ``S`` rescale.
    """
    img = _unwrap(I)
    warp = None if u is None else _unwrap(u)
    g = np.asarray(g)
    args = args or SamplerArgs()
    dims = _check(img, warp, g.shape)
    want = set(want)
    if not want <= {"I", "u", "A", "t"}:
        raise ValueError(f"unknown gradient request {want}")
    if warp is None:
        want.discard("u")
    lo, step = args.lattice(dims)
    dt = np.result_type(img.dtype, g.dtype)
    gI = alloc.zeros(img.shape, dt, label="grad_image") if "I" in want else np.zeros((1, 1, 1), dt)
    gu = (alloc.zeros(warp.shape, dt, label="grad_warp") if "u" in want
          else np.zeros((1, 1, 1, 3), dt))
    gA = np.zeros((3, 3))
    gt = np.zeros(3)
    _backward_kernel(g.astype(dt, copy=False), img.astype(dt, copy=False),
                     warp if warp is not None else _NO_WARP.astype(dt), warp is not None,
                     args.A, args.t, args.S, lo, step,
                     "I" in want, "u" in want, "A" in want, "t" in want, gI, gu, gA, gt)
    return SamplerGrads(gI if "I" in want else None, gu if "u" in want else None,
                        gA if "A" in want else None, gt if "t" in want else None)


def sample_nearest(labels, u=None, args: SamplerArgs | None = None, out_dims=None) -> np.ndarray:
    """Nearest-neighbour resampling (for label maps), zero outside the image."""
    img = _unwrap(labels)
    warp = None if u is None else _unwrap(u)
    args = args or SamplerArgs()
    dims = _check(img, warp, out_dims)
    lo, step = args.lattice(dims)
    out = np.zeros(dims, dtype=img.dtype)
    _nearest_kernel(img, warp if warp is not None else _NO_WARP, warp is not None,
                    args.A, args.t, args.S, lo, step, out)
    return out


# ---------------------------------------------------------------------------
# reference path with explicit grids


def identity_grid(dims, bounds: DomainBounds) -> np.ndarray:
    axes = [bounds.coordinates(dims, ax) for ax in range(3)]
    grid = alloc.empty(tuple(dims) + (3,), label="identity_grid")
    g0, g1, g2 = np.meshgrid(*axes, indexing="ij")
    grid[..., 0], grid[..., 1], grid[..., 2] = g0, g1, g2
    return grid


def _trilinear_reference(img, coords):
    """Vectorized trilinear weights: list of (index tuple, weight, d_weight/dp) per corner."""
    m = np.array(img.shape)
    p = (coords + 1.0) * 0.5 * (m - 1)
    r = np.floor(p + 0.5)
    p = np.where(np.abs(p - r) < SNAP_TOL, r, p)
    inside = np.all((p >= -1.0) & (p < m), axis=-1)
    i0 = np.floor(np.where(inside[..., None], p, 0.0)).astype(np.intp)
    f = np.where(inside[..., None], p - i0, 0.0)
    corners = []
    for c0 in (0, 1):
        for c1 in (0, 1):
            for c2 in (0, 1):
                c = np.array([c0, c1, c2])
                idx = i0 + c
                valid = inside & np.all((idx >= 0) & (idx < m), axis=-1)
                w_axes = np.where(c == 1, f, 1.0 - f)
                sign = np.where(c == 1, 1.0, -1.0)
                w = np.prod(w_axes, axis=-1) * valid
                dw = np.stack([
                    sign[0] * w_axes[..., 1] * w_axes[..., 2],
                    w_axes[..., 0] * sign[1] * w_axes[..., 2],
                    w_axes[..., 0] * w_axes[..., 1] * sign[2],
                ], axis=-1) * valid[..., None]
                safe = np.where(valid[..., None], idx, 0)
                corners.append(((safe[..., 0], safe[..., 1], safe[..., 2]), w, dw))
    return corners, 0.5 * (m - 1)


def materialized_grid(u, args: SamplerArgs, dims) -> np.ndarray:
    X = identity_grid(dims, args.bounds)
    aff = alloc.record("affine_grid", X @ args.A.T + args.t)
    if u is None:
        return aff
    return alloc.record("warped_grid", aff + args.S * u)


def sample_materialized(I, u=None, args: SamplerArgs | None = None, out_dims=None) -> np.ndarray:
    """Same result as :func:`fused_sample`, computed from explicit coordinate grids."""
    img = _unwrap(I)
    warp = None if u is None else _unwrap(u)
    args = args or SamplerArgs()
    dims = _check(img, warp, out_dims)
    grid = materialized_grid(warp, args, dims)
    corners, _ = _trilinear_reference(img, grid)
    out = alloc.zeros(dims, dtype=img.dtype, label="sampler_output")
    for idx, w, _dw in corners:
        out += w * img[idx]
    return out


def sample_materialized_backward(g, I, u=None, args: SamplerArgs | None = None,
                                 want=("I", "u", "A", "t")) -> SamplerGrads:
    img = _unwrap(I)
    warp = None if u is None else _unwrap(u)
    args = args or SamplerArgs()
    g = np.asarray(g, dtype=np.float64)
    dims = _check(img, warp, g.shape)
    want = set(want)
    X = identity_grid(dims, args.bounds)
    grid = X @ args.A.T + args.t
    if warp is not None:
        grid = grid + args.S * warp
    corners, half = _trilinear_reference(img, grid)
    gI = np.zeros(img.shape)
    dv = np.zeros(dims + (3,))
    for idx, w, dw in corners:
        vals = img[idx]
        dv += dw * vals[..., None]
        if "I" in want:
            np.add.at(gI, idx, w * g)
    q = dv * half * g[..., None]
    gu = args.S * q if ("u" in want and warp is not None) else None
    gA = np.einsum("ijkc,ijkd->cd", q, X) if "A" in want else None
    gt = q.reshape(-1, 3).sum(axis=0) if "t" in want else None
    return SamplerGrads(gI if "I" in want else None, gu, gA, gt)


# ---------------------------------------------------------------------------
# warp algebra


def compose(u_outer, u_inner):
    """Displacement of ``x -> x + u_inner(x) -> ... + u_outer(.)``.

    ``result(x) = u_inner(x) + u_outer(x + u_inner(x))`` with ``u_outer``
    sampled trilinearly (zero padding). Both fields share one lattice.
    """
    outer = _unwrap(u_outer)
    inner = _unwrap(u_inner)
    if outer.shape != inner.shape:
        raise ValueError(f"lattice mismatch {outer.shape} vs {inner.shape}")
    res = inner.copy()
    for c in range(3):
        res[..., c] += fused_sample(np.ascontiguousarray(outer[..., c]), inner)
    return WarpField(res) if isinstance(u_inner, WarpField) else res


def scaling_and_squaring(v, steps: int = 7):
    """Integrate a stationary velocity field: halve ``steps`` times, then self-compose."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    u = _unwrap(v) / (2.0 ** steps)
    for _ in range(steps):
        u = compose(u, u)
    return WarpField(u) if isinstance(v, WarpField) else u
