"""In-process multi-worker runtime.

``WorkerGroup(H).run(fn, args)`` starts one thread per rank and calls
``fn(comm, *args[rank])``. Workers never share arrays: every message is a
copy delivered over a per-pair FIFO channel, and every collective reduces in
rank order so results are bit-identical across ranks and runs.

Volumes are sharded along the last spatial axis into contiguous slabs; the
first ``N mod H`` slabs get one extra plane.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core.types import DomainBounds, Volume3, WarpField

SHARD_AXIS = 2


# ---------------------------------------------------------------------------
# sharding


@dataclass(frozen=True)
class ShardSpec:
    rank: int
    size: int
    lo: int
    hi: int
    dims: tuple[int, int, int]
    bounds: DomainBounds
    axis: int = SHARD_AXIS

    @property
    def thickness(self) -> int:
        return self.hi - self.lo

    @property
    def local_dims(self) -> tuple[int, int, int]:
        return (self.dims[0], self.dims[1], self.thickness)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.thickness

    @property
    def n_total(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]


def shard_ranges(n: int, H: int) -> list[tuple[int, int]]:
    if H < 1:
        raise ValueError(f"world size must be positive, got {H}")
    if H > n:
        raise ValueError(f"cannot split an axis of {n} planes across {H} ranks")
    base, extra = divmod(n, H)
    out = []
    lo = 0
    for r in range(H):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def shard_specs(dims, H: int) -> list[ShardSpec]:
    """Specs for splitting a lattice of shape ``dims`` across ``H`` ranks."""
    dims = tuple(int(d) for d in dims)
    n = dims[SHARD_AXIS]
    specs = []
    for r, (lo, hi) in enumerate(shard_ranges(n, H)):
        x_min = -np.ones(3)
        x_max = np.ones(3)
        if n > 1:
            x_min[SHARD_AXIS] = -1.0 + 2.0 * lo / (n - 1)
            x_max[SHARD_AXIS] = -1.0 + 2.0 * (hi - 1) / (n - 1)
        specs.append(ShardSpec(r, H, lo, hi, dims, DomainBounds(x_min, x_max)))
    return specs


def _shard_data(v):
    if isinstance(v, (Volume3, WarpField)):
        return v.data
    return np.asarray(v)


def shard(v, H: int):
    """Split ``v`` into ``H`` last-axis slabs. Returns ``(shards, specs)``.

    Shards have the input's type; volume shards keep their physical placement
    through a shifted origin.
    """
    data = _shard_data(v)
    specs = shard_specs(data.shape[:3], H)
    shards = []
    for s in specs:
        block = data[:, :, s.lo:s.hi].copy()
        if isinstance(v, Volume3):
            origin = v.origin.copy()
            origin[SHARD_AXIS] += s.lo * v.spacing[SHARD_AXIS]
            shards.append(Volume3(block, v.spacing.copy(), origin))
        elif isinstance(v, WarpField):
            shards.append(WarpField(block))
        else:
            shards.append(block)
    return shards, specs


def gather(shards: Sequence):
    """Concatenate slabs back along the shard axis (inverse of :func:`shard`)."""
    if not shards:
        raise ValueError("nothing to gather")
    data = np.concatenate([_shard_data(s) for s in shards], axis=SHARD_AXIS)
    first = shards[0]
    if isinstance(first, Volume3):
        return Volume3(data, first.spacing.copy(), first.origin.copy())
    if isinstance(first, WarpField):
        return WarpField(data)
    return data


# ---------------------------------------------------------------------------
# runtime


class CollectiveError(RuntimeError):
    pass


@dataclass
class _Message:
    seq: int
    tag: str
    payload: Any


@dataclass
class HaloBlock:
    """A shard extended by ``left`` and ``right`` neighbor planes on the shard axis."""

    data: np.ndarray
    left: int
    right: int

    def crop(self, arr: np.ndarray | None = None) -> np.ndarray:
        arr = self.data if arr is None else arr
        n = arr.shape[SHARD_AXIS]
        return arr[:, :, self.left:n - self.right]


@dataclass
class RankStats:
    """Per-rank instrumentation.

    ``payloads`` lists ``(tag, elements)`` contributed to each reduction.
    ``aux_bytes`` is the storage currently held for remote blocks and
    ``aux_peak`` its high-water mark.
    """

    payloads: list = field(default_factory=list)
    messages: int = 0
    aux_bytes: int = 0
    aux_peak: int = 0

    def payload(self, tag: str) -> list[int]:
        return [n for t, n in self.payloads if t == tag]


def _copy(x):
    if isinstance(x, np.ndarray):
        return x.copy()
    if isinstance(x, (list, tuple)):
        return type(x)(_copy(v) for v in x)
    return x


class Comm:
    """One rank's endpoint into a :class:`WorkerGroup`."""

    def __init__(self, group: "WorkerGroup", rank: int):
        self.group = group
        self.rank = rank
        self.size = group.size
        self.stats = RankStats()
        self._send_seq = [0] * self.size
        self._recv_seq = [0] * self.size

    # point to point

    def send(self, dst: int, payload, tag: str = "p2p") -> None:
        seq = self._send_seq[dst]
        self._send_seq[dst] += 1
        self.stats.messages += 1
        self.group._channels[self.rank][dst].put(_Message(seq, tag, _copy(payload)))

    def recv(self, src: int, tag: str = "p2p"):
        try:
            msg = self.group._channels[src][self.rank].get(timeout=self.group.timeout)
        except queue.Empty:
            raise CollectiveError(f"rank {self.rank}: timed out waiting for rank {src} ({tag})") from None
        expected = self._recv_seq[src]
        self._recv_seq[src] += 1
        if msg.seq != expected:
            raise CollectiveError(f"rank {self.rank}: message {msg.seq} from {src} arrived out of order")
        if msg.tag != tag:
            raise CollectiveError(
                f"rank {self.rank}: expected {tag!r} from rank {src}, got {msg.tag!r}")
        return msg.payload

    def barrier(self) -> None:
        try:
            self.group._barrier.wait(timeout=self.group.timeout)
        except threading.BrokenBarrierError:
            raise CollectiveError(f"rank {self.rank}: barrier broken") from None

    # collectives

    def ring_send_recv(self, block, offset: int):
        """Send ``block`` ``offset`` ranks ahead; return the block from ``offset`` ranks behind."""
        H = self.size
        offset %= H
        if offset == 0:
            return block
        self.send((self.rank + offset) % H, block, tag="ring")
        return self.recv((self.rank - offset) % H, tag="ring")

    def allgather(self, value, tag: str = "allgather") -> list:
        for dst in range(self.size):
            if dst != self.rank:
                self.send(dst, value, tag=tag)
        out = []
        for src in range(self.size):
            out.append(_copy(value) if src == self.rank else self.recv(src, tag=tag))
        return out

    def allreduce(self, value, op: str = "sum", weight: float | None = None):
        """Rank-ordered reduction; ``op`` is ``sum``, ``weighted-sum`` or ``max``."""
        if op not in ("sum", "weighted-sum", "max"):
            raise ValueError(f"unknown reduction {op!r}")
        if op == "weighted-sum" and weight is None:
            raise ValueError("weighted-sum needs a weight")
        arr = np.asarray(value, dtype=np.float64)
        self.stats.payloads.append((op, int(arr.size)))
        contrib = (arr, weight) if op == "weighted-sum" else arr
        parts = self.allgather(contrib, tag=f"allreduce:{op}")
        shapes = {np.shape(p[0] if op == "weighted-sum" else p) for p in parts}
        if len(shapes) != 1:
            raise CollectiveError(f"allreduce shapes differ across ranks: {sorted(shapes)}")
        if op == "sum":
            acc = parts[0].copy()
            for p in parts[1:]:
                acc = acc + p
        elif op == "max":
            acc = parts[0].copy()
            for p in parts[1:]:
                acc = np.maximum(acc, p)
        else:
            acc = parts[0][0] * parts[0][1]
            for p, w in parts[1:]:
                acc = acc + p * w
        if np.ndim(value) == 0 and not isinstance(value, np.ndarray):
            return float(acc)
        return acc

    def halo_exchange(self, block: np.ndarray, pad: int) -> HaloBlock:
        """Extend ``block`` with up to ``pad`` planes from each neighbor along the shard axis."""
        if pad < 0:
            raise ValueError(f"pad must be non-negative, got {pad}")
        H = self.size
        if H == 1 or pad == 0:
            return HaloBlock(block, 0, 0)
        thick = self.allgather(int(block.shape[SHARD_AXIS]), tag="halo:thickness")
        if pad > min(thick):
            raise ValueError(f"halo of {pad} planes exceeds the thinnest shard ({min(thick)} planes)")
        r = self.rank
        if r > 0:
            self.send(r - 1, block[:, :, :pad], tag="halo:left")
        if r < H - 1:
            self.send(r + 1, block[:, :, -pad:], tag="halo:right")
        parts = [block]
        left = right = 0
        if r > 0:
            parts.insert(0, self.recv(r - 1, tag="halo:right"))
            left = pad
        if r < H - 1:
            parts.append(self.recv(r + 1, tag="halo:left"))
            right = pad
        return HaloBlock(np.concatenate(parts, axis=SHARD_AXIS), left, right)

    # instrumentation

    def hold(self, arr: np.ndarray) -> None:
        self.stats.aux_bytes += int(arr.nbytes)
        self.stats.aux_peak = max(self.stats.aux_peak, self.stats.aux_bytes)

    def release(self, arr: np.ndarray) -> None:
        self.stats.aux_bytes -= int(arr.nbytes)


class WorkerGroup:
    """``H`` in-process workers joined by FIFO channels and a barrier."""

    def __init__(self, size: int, timeout: float = 60.0):
        if size < 1:
            raise ValueError(f"world size must be positive, got {size}")
        self.size = size
        self.timeout = timeout
        self._channels = [[queue.Queue() for _ in range(size)] for _ in range(size)]
        self._barrier = threading.Barrier(size)
        self.comms = [Comm(self, r) for r in range(size)]

    def run(self, fn: Callable, args: Sequence[Sequence] | None = None) -> list:
        """Run ``fn(comm, *args[rank])`` on every rank; returns per-rank results."""
        args = [()] * self.size if args is None else list(args)
        if len(args) != self.size:
            raise ValueError(f"expected {self.size} argument tuples, got {len(args)}")
        results: list = [None] * self.size
        errors: list = [None] * self.size

        def work(r):
            try:
                results[r] = fn(self.comms[r], *args[r])
            except BaseException as exc:  # surfaced to the caller below
                errors[r] = exc
                self._barrier.abort()

        if self.size == 1:
            work(0)
        else:
            threads = [threading.Thread(target=work, args=(r,), daemon=True) for r in range(self.size)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        failed = [e for e in errors if e is not None]
        if failed:
            primary = [e for e in failed if not isinstance(e, CollectiveError)]
            raise (primary or failed)[0]
        return results
