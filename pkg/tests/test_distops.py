import numpy as np
import pytest

from shardreg.core.smoothing import box_kernel1d, convolve_separable, gaussian_kernel1d, normalized_convolve
from shardreg.distops import (dist_lncc, dist_mi, dist_mse, gp_convolve, ring_sample, ring_sample_backward,
                              shard_rescale)
from shardreg.fabric import WorkerGroup, gather, shard, shard_specs
from shardreg.lncc import lncc_backward_fused, lncc_forward_fused
from shardreg.mi import mi_backward, mi_forward_approx, mi_forward_exact
from shardreg.sampler import SamplerArgs, fused_sample, fused_sample_backward


def run(H, fn):
    return WorkerGroup(H, timeout=30.0).run(fn)


def small_affine(rng, scale=0.05):
    return np.eye(3) + scale * rng.standard_normal((3, 3)), scale * rng.standard_normal(3)


class TestGpConvolve:
    @pytest.mark.parametrize("H", [1, 2, 4])
    @pytest.mark.parametrize("kernel", [box_kernel1d(5), gaussian_kernel1d(1.0)])
    def test_matches_global(self, rng, H, kernel):
        x = rng.standard_normal((6, 7, 16))
        shards, _ = shard(x, H)
        out = run(H, lambda comm: gp_convolve(comm, shards[comm.rank], kernel))
        assert np.abs(gather(out) - convolve_separable(x, kernel)).max() <= 1e-12

    @pytest.mark.parametrize("H", [2, 4])
    def test_normalized_matches_global(self, rng, H):
        x = rng.standard_normal((5, 5, 12, 3))
        k = gaussian_kernel1d(0.8)
        shards, _ = shard(x, H)
        out = run(H, lambda comm: gp_convolve(comm, shards[comm.rank], k, normalized=True))
        assert np.abs(gather(out) - normalized_convolve(x, k)).max() <= 1e-12

    def test_sync_off_errs_only_near_internal_boundaries(self, rng):
        H, k = 4, box_kernel1d(5)
        pad = len(k) // 2
        x = rng.standard_normal((4, 4, 20))
        shards, specs = shard(x, H)
        out = run(H, lambda comm: gp_convolve(comm, shards[comm.rank], k, sync=False))
        bad = np.any(np.abs(gather(out) - convolve_separable(x, k)) > 1e-12, axis=(0, 1))
        near = np.zeros(20, bool)
        for s in specs[1:]:
            near[s.lo - pad:s.lo + pad] = True
        assert not np.any(bad & ~near)
        assert np.array_equal(bad, near)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            run(1, lambda comm: gp_convolve(comm, np.zeros((3, 3, 3)), np.ones(4) / 4))


class TestShardRescale:
    @pytest.mark.parametrize("H", [1, 2, 3, 5])
    def test_endpoints(self, H):
        for spec in shard_specs((7, 8, 15), H):
            rs = shard_rescale(spec)
            assert np.abs(rs.S * spec.bounds.x_min + rs.t + 1).max() <= 1e-14
            assert np.abs(rs.S * spec.bounds.x_max + rs.t - 1).max() <= 1e-14

    def test_single_plane_rejected(self):
        spec = shard_specs((4, 4, 5), 5)[0]
        with pytest.raises(ValueError):
            shard_rescale(spec)


def ring_forward(H, M, u, A, t, trace=False):
    Ms, specs = shard(M, H)
    us, _ = shard(u, H) if u is not None else ([None] * H, None)
    traces = [[] for _ in range(H)]

    def fn(comm):
        r = comm.rank
        out = ring_sample(comm, us[r], Ms[r], A, t, specs[r], trace=traces[r] if trace else None)
        return out, comm.stats.aux_peak

    res = run(H, fn)
    return gather([o for o, _ in res]), [p for _, p in res], traces, Ms


class TestRingSample:
    @pytest.mark.parametrize("H", [1, 2, 3, 4])
    def test_matches_global_sampler(self, rng, H):
        M = rng.standard_normal((12, 12, 12))
        u = 0.08 * rng.standard_normal((12, 12, 12, 3))
        A, t = small_affine(rng)
        out, _, _, _ = ring_forward(H, M, u, A, t)
        ref = fused_sample(M, u, SamplerArgs(A, t))
        tol = 1e-12 if H == 1 else 1e-9
        assert np.abs(out - ref).max() <= tol

    def test_without_warp(self, rng):
        M = rng.standard_normal((8, 8, 12))
        A, t = small_affine(rng)
        out, _, _, _ = ring_forward(3, M, None, A, t)
        assert np.abs(out - fused_sample(M, None, SamplerArgs(A, t))).max() <= 1e-9

    def test_samples_land_on_owning_rank(self, rng):
        M = rng.random((8, 8, 16)) + 0.5
        A = np.diag([1.0, 1.0, 0.0])
        t = np.array([0.0, 0.0, -0.9])
        out, _, traces, _ = ring_forward(4, M, None, A, t, trace=True)
        assert np.abs(out - fused_sample(M, None, SamplerArgs(A, t))).max() <= 1e-12
        for tr in traces:
            assert sorted(src for src, _ in tr) == [0, 1, 2, 3]
            for src, norm in tr:
                assert (norm > 0) == (src == 0)

    def test_aux_peak_is_one_block(self, rng):
        M = rng.standard_normal((6, 6, 12))
        _, peaks, _, Ms = ring_forward(4, M, None, np.eye(3), np.zeros(3))
        assert peaks == [Ms[0].nbytes] * 4


def ring_backward(H, g, M, u, A, t, want=("u", "A", "t", "M")):
    Ms, specs = shard(M, H)
    us, _ = shard(u, H)
    gs, _ = shard(g, H)
    res = run(H, lambda comm: ring_sample_backward(comm, gs[comm.rank], Ms[comm.rank], us[comm.rank], A, t,
                                                   specs[comm.rank], want=want))
    return (gather([r.gu for r in res]), res[0].gA, res[0].gt, gather([r.gM for r in res]),
            [r.gA for r in res])


class TestRingBackward:
    @pytest.mark.parametrize("H", [2, 4])
    def test_matches_global_adjoint(self, rng, H):
        M = rng.standard_normal((8, 8, 8))
        u = 0.08 * rng.standard_normal((8, 8, 8, 3))
        g = rng.standard_normal((8, 8, 8))
        A, t = small_affine(rng)
        gu, gA, gt, gM, all_gA = ring_backward(H, g, M, u, A, t)
        ref = fused_sample_backward(g, M, u, SamplerArgs(A, t))
        for a, b in [(gu, ref.gu), (gA, ref.gA), (gt, ref.gt), (gM, ref.gI)]:
            assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(b).max())
        assert all(np.array_equal(all_gA[0], x) for x in all_gA)

    def test_zero_upstream(self, rng):
        M = rng.standard_normal((6, 6, 8))
        u = 0.05 * rng.standard_normal((6, 6, 8, 3))
        gu, gA, gt, gM, _ = ring_backward(2, np.zeros(M.shape), M, u, np.eye(3), np.zeros(3))
        assert not (gu.any() or gA.any() or gt.any() or gM.any())

    def test_finite_differences_through_collective(self):
        r = np.random.default_rng(8)
        H, shape = 2, (6, 6, 6)
        M = r.standard_normal(shape)
        u = 0.07 * r.standard_normal(shape + (3,))
        w = r.standard_normal(shape)
        A, t = small_affine(r, 0.03)

        def loss(M_, u_, A_, t_):
            out, _, _, _ = ring_forward(H, M_, u_, A_, t_)
            return float(np.sum(w * out))

        gu, gA, gt, gM, _ = ring_backward(H, w, M, u, A, t)
        h = 1e-6
        checks = []
        for idx in [(0, 0), (1, 2), (2, 1)]:
            e = np.zeros((3, 3))
            e[idx] = h
            checks.append((gA[idx], (loss(M, u, A + e, t) - loss(M, u, A - e, t)) / (2 * h)))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            checks.append((gt[k], (loss(M, u, A, t + e) - loss(M, u, A, t - e)) / (2 * h)))
        for idx in [(1, 2, 2, 0), (3, 3, 3, 2), (4, 1, 5, 1)]:
            e = np.zeros_like(u)
            e[idx] = h
            checks.append((gu[idx], (loss(M, u + e, A, t) - loss(M, u - e, A, t)) / (2 * h)))
        for idx in [(2, 2, 2), (3, 1, 3), (0, 5, 4)]:
            e = np.zeros_like(M)
            e[idx] = h
            checks.append((gM[idx], (loss(M + e, u, A, t) - loss(M - e, u, A, t)) / (2 * h)))
        a = np.array(checks)
        assert np.abs(a[:, 0] - a[:, 1]).max() <= 1e-5 * np.abs(a[:, 1]).max()


def dist_run(H, fn, F, M):
    Fs, specs = shard(F, H)
    Ms, _ = shard(M, H)
    n = F.size

    def work(comm):
        out = fn(comm, Fs[comm.rank], Ms[comm.rank], n)
        return out, comm.stats.payloads

    res = run(H, work)
    losses = [r[0].loss for r in res]
    assert all(x == losses[0] for x in losses)
    return losses[0], gather([r[0].g_fixed for r in res]), gather([r[0].g_moving for r in res]), res[0][1]


class TestDistLosses:
    @pytest.mark.parametrize("H", [1, 2, 4])
    def test_mse(self, rng, H):
        F, M = rng.standard_normal((2, 6, 6, 12))
        loss, gF, gM, _ = dist_run(H, dist_mse, F, M)
        assert loss == pytest.approx(np.mean((M - F) ** 2), abs=1e-12)
        assert np.abs(gM - 2 * (M - F) / F.size).max() <= 1e-15
        assert np.array_equal(gF, -gM)

    @pytest.mark.parametrize("H", [1, 2, 4])
    @pytest.mark.parametrize("ants", [False, True])
    def test_lncc(self, rng, H, ants):
        F = rng.random((8, 8, 16))
        M = 0.5 * F + 0.5 * rng.random(F.shape)
        loss, gF, gM, _ = dist_run(H, lambda c, f, m, n: dist_lncc(c, f, m, n, window=5, use_ants_approx=ants),
                                   F, M)
        ref, state = lncc_forward_fused(F, M, 5)
        rF, rM = lncc_backward_fused(1.0, state, F, M, ants)
        assert abs(loss - ref) <= 1e-10
        assert np.abs(gF - rF).max() <= 1e-10
        assert np.abs(gM - rM).max() <= 1e-10

    def test_lncc_sync_off_differs(self, rng):
        F = rng.random((8, 8, 16))
        M = 0.5 * F + 0.5 * rng.random(F.shape)
        ref, _ = lncc_forward_fused(F, M, 5)
        off, _, _, _ = dist_run(4, lambda c, f, m, n: dist_lncc(c, f, m, n, window=5, sync=False), F, M)
        assert abs(off - ref) > 1e-6

    @pytest.mark.parametrize("H", [1, 2, 4])
    @pytest.mark.parametrize("approx", [False, True])
    def test_mi(self, rng, H, approx):
        B = 16
        F = rng.random((6, 6, 12))
        M = np.clip(F + 0.2 * rng.standard_normal(F.shape), 0, 1)
        loss, gF, gM, payloads = dist_run(H, lambda c, f, m, n: dist_mi(c, f, m, n, bins=B, approx=approx), F, M)
        value, h = (mi_forward_approx if approx else mi_forward_exact)(F, M, B)
        rF, rM = mi_backward(-1.0, F, M, h)
        assert abs(loss + value) <= 1e-10
        assert np.abs(gF - rF).max() <= 1e-10
        assert np.abs(gM - rM).max() <= 1e-10
        assert [n for tag, n in payloads] == [B * B + 2 * B]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            run(1, lambda comm: dist_mse(comm, np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 8))
