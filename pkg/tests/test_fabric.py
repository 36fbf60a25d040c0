import numpy as np
import pytest
from hypothesis import given, strategies as st

from shardreg.core.types import Volume3, WarpField
from shardreg.fabric import CollectiveError, WorkerGroup, gather, shard, shard_ranges, shard_specs


def run(H, fn, args=None, timeout=10.0):
    return WorkerGroup(H, timeout=timeout).run(fn, args)


class TestSharding:
    def test_uneven_split(self):
        assert [hi - lo for lo, hi in shard_ranges(10, 4)] == [3, 3, 2, 2]

    @pytest.mark.parametrize("H", [1, 2, 3, 8])
    def test_gather_round_trip(self, rng, H):
        v = Volume3(rng.standard_normal((5, 4, 11)), spacing=(1.0, 2.0, 0.5), origin=(1, 2, 3))
        shards, specs = shard(v, H)
        assert sum(s.thickness for s in specs) == 11
        back = gather(shards)
        assert np.array_equal(back.data, v.data)
        assert np.allclose(back.origin, v.origin)

    def test_shard_origins_follow_planes(self, rng):
        v = Volume3(rng.standard_normal((3, 3, 9)), spacing=(1.0, 1.0, 0.5), origin=(0, 0, 1))
        shards, specs = shard(v, 3)
        for s, spec in zip(shards, specs):
            assert s.origin[2] == pytest.approx(1 + 0.5 * spec.lo)

    def test_warp_round_trip(self, rng):
        u = WarpField(rng.standard_normal((4, 4, 7, 3)))
        shards, _ = shard(u, 3)
        assert all(isinstance(s, WarpField) for s in shards)
        assert np.array_equal(gather(shards).data, u.data)

    def test_single_rank_bounds(self):
        (spec,) = shard_specs((6, 6, 6), 1)
        assert np.array_equal(spec.bounds.x_min, -np.ones(3))
        assert np.array_equal(spec.bounds.x_max, np.ones(3))

    def test_bounds_hit_planes(self):
        specs = shard_specs((4, 4, 9), 3)
        for s in specs:
            assert s.bounds.x_min[2] == pytest.approx(-1 + 2 * s.lo / 8)
            assert s.bounds.x_max[2] == pytest.approx(-1 + 2 * (s.hi - 1) / 8)

    def test_too_many_ranks(self):
        with pytest.raises(ValueError):
            shard_ranges(3, 4)
        with pytest.raises(ValueError):
            shard_ranges(3, 0)

    @given(st.integers(1, 40), st.integers(1, 40))
    def test_ranges_partition(self, n, H):
        if H > n:
            return
        r = shard_ranges(n, H)
        assert r[0][0] == 0 and r[-1][1] == n
        assert all(a[1] == b[0] for a, b in zip(r, r[1:]))
        sizes = [hi - lo for lo, hi in r]
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)


class TestPointToPoint:
    def test_ring_offset_zero_is_identity(self):
        def fn(comm):
            x = np.arange(3.0) + comm.rank
            return comm.ring_send_recv(x, 0) is x

        assert all(run(3, fn))

    @pytest.mark.parametrize("offset", [1, 2, -1, 5])
    def test_ring_offsets(self, offset):
        H = 4

        def fn(comm):
            return int(comm.ring_send_recv(np.array([comm.rank]), offset)[0])

        assert run(H, fn) == [(r - offset) % H for r in range(H)]

    def test_ring_composes_to_identity(self):
        H = 3

        def fn(comm):
            x = np.array([float(comm.rank)])
            for _ in range(H):
                x = comm.ring_send_recv(x, 1)
            return float(x[0])

        assert run(H, fn) == [0.0, 1.0, 2.0]

    def test_messages_are_copies(self):
        def fn(comm):
            if comm.rank == 0:
                x = np.zeros(3)
                comm.send(1, x)
                x[:] = 7
                return None
            return comm.recv(0)

        assert np.array_equal(run(2, fn)[1], np.zeros(3))

    def test_fifo_order(self):
        def fn(comm):
            if comm.rank == 0:
                for i in range(20):
                    comm.send(1, i)
                return None
            return [comm.recv(0) for _ in range(20)]

        assert run(2, fn)[1] == list(range(20))

    def test_tag_mismatch(self):
        def fn(comm):
            if comm.rank == 0:
                comm.send(1, 1, tag="a")
            else:
                comm.recv(0, tag="b")

        with pytest.raises(CollectiveError):
            run(2, fn)

    def test_missing_participant_times_out(self):
        def fn(comm):
            if comm.rank == 0:
                return comm.allreduce(1.0)
            return None

        with pytest.raises(CollectiveError):
            run(2, fn, timeout=0.3)

    def test_worker_exception_surfaces(self):
        def fn(comm):
            if comm.rank == 1:
                raise KeyError("boom")
            comm.barrier()

        with pytest.raises(KeyError):
            run(2, fn, timeout=2.0)


class TestCollectives:
    def test_allreduce_sum(self):
        def fn(comm):
            return comm.allreduce(np.full(4, comm.rank + 1.0))

        for res in run(4, fn):
            assert np.array_equal(res, np.full(4, 10.0))

    def test_allreduce_scalar_type(self):
        out = run(3, lambda comm: comm.allreduce(float(comm.rank)))
        assert out == [3.0, 3.0, 3.0] and all(isinstance(x, float) for x in out)

    def test_weighted_sum(self):
        w = [0.5, 0.25, 0.25]

        def fn(comm):
            return comm.allreduce(np.array([comm.rank + 1.0]), op="weighted-sum", weight=w[comm.rank])

        for res in run(3, fn):
            assert res[0] == pytest.approx(0.5 + 0.5 + 0.75)

    def test_max(self):
        out = run(3, lambda comm: comm.allreduce(float(comm.rank * 2), op="max"))
        assert out == [4.0, 4.0, 4.0]

    def test_single_rank(self):
        assert run(1, lambda comm: comm.allreduce(2.5)) == [2.5]

    def test_bad_op(self):
        with pytest.raises(ValueError):
            run(1, lambda comm: comm.allreduce(1.0, op="mean"))
        with pytest.raises(ValueError):
            run(1, lambda comm: comm.allreduce(1.0, op="weighted-sum"))

    def test_bit_identical_across_ranks(self, rng):
        parts = [rng.standard_normal(100) * 10 ** k for k in range(4)]
        out = run(4, lambda comm: comm.allreduce(parts[comm.rank]))
        assert all(np.array_equal(out[0], o) for o in out)
        again = run(4, lambda comm: comm.allreduce(parts[comm.rank]))
        assert np.array_equal(out[0], again[0])

    def test_payload_recorded(self):
        def fn(comm):
            comm.allreduce(np.zeros(7))
            return comm.stats.payload("sum")

        assert run(2, fn) == [[7], [7]]


class TestHalo:
    def test_single_rank_or_zero_pad(self, rng):
        block = rng.standard_normal((3, 3, 4))
        hb = run(1, lambda comm: comm.halo_exchange(block, 2))[0]
        assert hb.left == hb.right == 0 and np.array_equal(hb.data, block)
        out = run(2, lambda comm: comm.halo_exchange(block, 0))
        assert all(h.left == h.right == 0 for h in out)

    def test_ramp(self):
        full = np.broadcast_to(np.arange(10.0), (2, 2, 10)).copy()
        shards, specs = shard(full, 2)

        def fn(comm):
            return comm.halo_exchange(shards[comm.rank], 2)

        left, right = run(2, fn)
        assert (left.left, left.right) == (0, 2)
        assert (right.left, right.right) == (2, 0)
        assert np.array_equal(left.data[0, 0], np.arange(7.0))
        assert np.array_equal(right.data[0, 0], np.arange(3.0, 10.0))
        assert np.array_equal(right.crop(), shards[1])

    def test_middle_rank_gets_both_sides(self):
        full = np.broadcast_to(np.arange(12.0), (1, 1, 12)).copy()
        shards, _ = shard(full, 3)
        hb = run(3, lambda comm: comm.halo_exchange(shards[comm.rank], 1))[1]
        assert np.array_equal(hb.data[0, 0], np.arange(3.0, 9.0))

    def test_pad_exceeds_shard(self):
        shards, _ = shard(np.zeros((2, 2, 6)), 3)
        with pytest.raises(ValueError):
            run(3, lambda comm: comm.halo_exchange(shards[comm.rank], 3))
