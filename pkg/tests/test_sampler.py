import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shardreg.core import alloc
from shardreg.sampler import (SamplerArgs, compose, fused_sample, fused_sample_backward, sample_materialized,
                              sample_materialized_backward, sample_nearest, scaling_and_squaring)


def point_value(img, p):
    """Trilinear value at continuous voxel index ``p`` with zero padding, one corner at a time."""
    n = img.shape
    if not all(-1.0 <= p[a] < n[a] for a in range(3)):
        return 0.0
    base = [math.floor(p[a]) for a in range(3)]
    frac = [p[a] - base[a] for a in range(3)]
    total = 0.0
    for c0 in (0, 1):
        for c1 in (0, 1):
            for c2 in (0, 1):
                idx = (base[0] + c0, base[1] + c1, base[2] + c2)
                if any(idx[a] < 0 or idx[a] >= n[a] for a in range(3)):
                    continue
                w = 1.0
                for a, c in enumerate((c0, c1, c2)):
                    w *= frac[a] if c else 1.0 - frac[a]
                total += w * img[idx]
    return total


def source_index(args, u, img_shape, out_shape):
    """Continuous voxel indices into the image for every output voxel."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in out_shape]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    src = X @ args.A.T + args.t
    if u is not None:
        src = src + args.S * u
    half = (np.asarray(img_shape) - 1) / 2.0
    return (src + 1.0) * half


def pointwise_sample(img, u, args, out_shape):
    P = source_index(args, u, img.shape, out_shape)
    out = np.zeros(out_shape)
    for idx in np.ndindex(*out_shape):
        out[idx] = point_value(img, P[idx])
    return out


def random_instance(rng, n=6, margin=1e-4, scale=1.0):
    """Random image, warp and affine with no source coordinate within ``margin`` of a lattice plane.

    Interpolation is piecewise linear, so a finite difference straddling a
    cell face measures neither one-sided derivative.
    """
    while True:
        I = rng.standard_normal((n, n, n))
        u = 0.1 * scale * rng.standard_normal((n, n, n, 3))
        A = np.eye(3) + 0.1 * scale * rng.standard_normal((3, 3))
        t = 0.1 * scale * rng.standard_normal(3)
        args = SamplerArgs(A, t)
        P = source_index(args, u, I.shape, I.shape)
        if np.abs(P - np.round(P)).min() > margin:
            return I, u, args


def half_sq(I, u, args):
    return 0.5 * float(np.sum(fused_sample(I, u, args) ** 2))


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


class TestForward:
    def test_identity(self, rng):
        I = rng.standard_normal((7, 8, 9))
        assert np.abs(fused_sample(I, np.zeros(I.shape + (3,))) - I).max() <= 1e-12
        assert np.abs(fused_sample(I) - I).max() <= 1e-12

    def test_shifted_ramp(self):
        n = 8
        ramp = np.broadcast_to(np.arange(n, dtype=np.float64)[:, None, None], (n, n, n)).copy()
        args = SamplerArgs(t=[2.0 / (n - 1), 0.0, 0.0])
        out = fused_sample(ramp, None, args)
        np.testing.assert_allclose(out[:-1], ramp[1:], atol=1e-12)
        assert np.all(out[-1] == 0.0)

    def test_matches_materialized(self, rng):
        I, u, args = random_instance(rng, 8, margin=0.0)
        assert np.abs(fused_sample(I, u, args) - sample_materialized(I, u, args)).max() <= 1e-12

    def test_matches_pointwise_oracle(self, rng):
        I = rng.standard_normal((5, 6, 7))
        u = 0.3 * rng.standard_normal((4, 5, 6, 3))
        args = SamplerArgs(np.eye(3) + 0.2 * rng.standard_normal((3, 3)), 0.2 * rng.standard_normal(3))
        out = fused_sample(I, u, args)
        assert out.shape == (4, 5, 6)
        assert np.abs(out - pointwise_sample(I, u, args, (4, 5, 6))).max() <= 1e-12

    def test_out_dims_without_warp(self, rng):
        I = rng.standard_normal((6, 6, 6))
        args = SamplerArgs(np.diag([0.9, 1.1, 1.0]), [0.05, 0.0, -0.1])
        out = fused_sample(I, None, args, out_dims=(4, 5, 3))
        assert np.abs(out - pointwise_sample(I, None, args, (4, 5, 3))).max() <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fused_sample(np.zeros((4, 4, 4)), np.zeros((4, 4, 4, 2)))
        with pytest.raises(ValueError):
            fused_sample_backward(np.zeros((3, 3, 3)), np.zeros((4, 4, 4)), np.zeros((4, 4, 4, 3)))

    def test_fused_allocates_only_output(self, rng):
        I, u, args = random_instance(rng, 8, margin=0.0)
        with alloc.track() as c:
            fused_sample(I, u, args)
        assert c.count(3 * I.size) == 0
        assert c.labels() == ["sampler_output"]

    def test_materialized_allocates_grids(self, rng):
        I, u, args = random_instance(rng, 8, margin=0.0)
        with alloc.track() as c:
            sample_materialized(I, u, args)
        grids = [r for r in c.records if int(np.prod(r.shape)) == 3 * I.size]
        assert len(grids) >= 3

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_image(self, seed, a, b):
        r = np.random.default_rng(seed)
        I1, I2 = r.standard_normal((2, 5, 5, 5))
        u = 0.2 * r.standard_normal((5, 5, 5, 3))
        args = SamplerArgs(np.eye(3) + 0.1 * r.standard_normal((3, 3)), 0.1 * r.standard_normal(3))
        lhs = fused_sample(a * I1 + b * I2, u, args)
        rhs = a * fused_sample(I1, u, args) + b * fused_sample(I2, u, args)
        assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, abs(a) + abs(b)) * 10

    def test_nearest_identity_and_shift(self):
        lab = np.arange(4 * 5 * 6, dtype=np.int32).reshape(4, 5, 6)
        assert np.array_equal(sample_nearest(lab), lab)
        out = sample_nearest(lab, None, SamplerArgs(t=[2.0 / 3, 0.0, 0.0]))
        assert np.array_equal(out[:-1], lab[1:]) and not out[-1].any()


class TestBackward:
    def test_zero_upstream(self, rng):
        I, u, args = random_instance(rng, margin=0.0)
        g = fused_sample_backward(np.zeros(I.shape), I, u, args)
        for x in g:
            assert not np.any(x)

    def test_want_flags(self, rng):
        I, u, args = random_instance(rng, margin=0.0)
        g = fused_sample_backward(np.ones(I.shape), I, u, args, want=("A",))
        assert g.gI is None and g.gu is None and g.gt is None and g.gA.shape == (3, 3)

    def test_matches_materialized(self, rng):
        for _ in range(5):
            I, u, args = random_instance(rng, margin=0.0)
            g = rng.standard_normal(I.shape)
            a = fused_sample_backward(g, I, u, args)
            b = sample_materialized_backward(g, I, u, args)
            for x, y in zip(a, b):
                assert np.abs(x - y).max() <= 1e-12 * max(1.0, np.abs(y).max())

    @pytest.mark.parametrize("trial", range(4))
    def test_finite_differences(self, trial):
        r = np.random.default_rng(100 + trial)
        I, u, args = random_instance(r)
        out = fused_sample(I, u, args)
        g = fused_sample_backward(out, I, u, args)
        h = 1e-5
        gI = np.zeros_like(I)
        for idx in np.ndindex(*I.shape):
            e = np.zeros_like(I)
            e[idx] = h
            gI[idx] = (half_sq(I + e, u, args) - half_sq(I - e, u, args)) / (2 * h)
        assert rel_err(g.gI, gI) <= 1e-6
        gu = np.zeros_like(u)
        for idx in np.ndindex(*u.shape):
            e = np.zeros_like(u)
            e[idx] = h
            gu[idx] = (half_sq(I, u + e, args) - half_sq(I, u - e, args)) / (2 * h)
        assert rel_err(g.gu, gu) <= 1e-6
        gA = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                e = np.zeros((3, 3))
                e[i, j] = h
                gA[i, j] = (half_sq(I, u, SamplerArgs(args.A + e, args.t))
                            - half_sq(I, u, SamplerArgs(args.A - e, args.t))) / (2 * h)
        assert rel_err(g.gA, gA) <= 1e-6
        gt = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            gt[i] = (half_sq(I, u, SamplerArgs(args.A, args.t + e))
                     - half_sq(I, u, SamplerArgs(args.A, args.t - e))) / (2 * h)
        assert rel_err(g.gt, gt) <= 1e-6

    def test_rescaled_warp_gradient(self, rng):
        I, u, _ = random_instance(rng, margin=0.0)
        S = np.array([0.5, 2.0, 1.5])
        base = fused_sample_backward(np.ones(I.shape), I, u, SamplerArgs())
        # scaling u by S inside the sampler equals sampling with S*u directly
        scaled = fused_sample_backward(np.ones(I.shape), I, u / S, SamplerArgs(S=S))
        np.testing.assert_allclose(scaled.gu, S * base.gu, atol=1e-12)

    def test_face_tie_uses_floor_cell(self, rng):
        """On a lattice point the derivative is the forward difference toward the next voxel."""
        n = 6
        I = rng.standard_normal((n, n, n))
        u = np.zeros((n, n, n, 3))
        g = fused_sample_backward(np.ones(I.shape), I, u, SamplerArgs(), want=("u",)).gu
        assert np.all(np.isfinite(g))
        half = (n - 1) / 2.0
        forward = np.zeros_like(I)
        forward[:-1] = I[1:] - I[:-1]
        forward[-1] = -I[-1]
        np.testing.assert_allclose(g[..., 0], forward * half, atol=1e-12)


class TestWarpAlgebra:
    def test_compose_zero(self, rng):
        u = 0.05 * rng.standard_normal((8, 8, 8, 3))
        z = np.zeros_like(u)
        assert np.abs(compose(z, u) - u).max() <= 1e-12
        inner = slice(1, -1)
        assert np.abs(compose(u, z) - u)[inner, inner, inner].max() <= 1e-12

    def test_compose_translations(self):
        n = 10
        a = np.zeros((n, n, n, 3))
        b = np.zeros((n, n, n, 3))
        a[..., 0] = 0.1
        b[..., 1] = -0.05
        b[..., 2] = 0.08
        out = compose(a, b)
        inner = slice(2, -2)
        np.testing.assert_allclose(out[inner, inner, inner], (a + b)[inner, inner, inner], atol=1e-12)

    def test_compose_pointwise_oracle(self, rng):
        n = 6
        outer = 0.1 * rng.standard_normal((n, n, n, 3))
        inner = 0.1 * rng.standard_normal((n, n, n, 3))
        expected = inner.copy()
        P = source_index(SamplerArgs(), inner, (n, n, n), (n, n, n))
        for idx in np.ndindex(n, n, n):
            for c in range(3):
                expected[idx + (c,)] += point_value(outer[..., c], P[idx])
        assert np.abs(compose(outer, inner) - expected).max() <= 1e-12

    def test_sas_zero(self):
        assert not np.any(scaling_and_squaring(np.zeros((5, 5, 5, 3))))

    def test_sas_constant(self):
        # zero padding leaks in from the edges a little at every squaring; 7 planes in it is gone
        v = np.zeros((24, 24, 24, 3))
        v[..., 2] = 0.12
        u = scaling_and_squaring(v)
        inner = slice(7, -7)
        np.testing.assert_allclose(u[inner, inner, inner], v[inner, inner, inner], atol=1e-12)

    def test_sas_linear_flow(self):
        n, lam = 24, 0.05
        x = np.linspace(-1, 1, n)
        v = np.zeros((n, n, n, 3))
        v[..., 0] = lam * x[:, None, None]
        u = scaling_and_squaring(v, 7)
        inner = slice(4, -4)
        exact = (np.exp(lam) - 1.0) * x[inner]
        err = np.abs(u[inner, inner, inner, 0] - exact[:, None, None]).max() / np.abs(exact).max()
        assert err <= 1e-3

    def test_sas_steps(self):
        with pytest.raises(ValueError):
            scaling_and_squaring(np.zeros((3, 3, 3, 3)), 0)
