"""Buffer accounting for the memory claims of the fused kernels.

Kernels that allocate lattice-sized (or grid-sized) arrays do so through
:func:`zeros` / :func:`empty`, which record the buffer in every active
:class:`AllocationCounter`. Tests open a counter around a call and inspect
what was allocated; when no counter is active the helpers are plain numpy.
Counters are per thread, so each worker of a group sees only its own buffers.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_local = threading.local()


def _active() -> list:
    if not hasattr(_local, "counters"):
        _local.counters = []
    return _local.counters


@dataclass(frozen=True)
class Allocation:
    label: str
    shape: tuple
    nbytes: int
    persistent: bool


@dataclass(eq=False)
class AllocationCounter:
    records: list[Allocation] = field(default_factory=list)

    def count(self, n_elements: int | None = None, *, persistent: bool | None = None,
              label: str | None = None) -> int:
        """Number of recorded buffers, optionally filtered.

        ``n_elements`` counts buffers in units of that many elements, so a
        ``(5, n0, n1, n2)`` state block counts as five lattice-sized buffers.
        """
        total = 0
        for rec in self.records:
            if persistent is not None and rec.persistent != persistent:
                continue
            if label is not None and rec.label != label:
                continue
            if n_elements is None:
                total += 1
            else:
                size = int(np.prod(rec.shape))
                if size >= n_elements:
                    total += size // n_elements
        return total

    @property
    def total_bytes(self) -> int:
        return sum(r.nbytes for r in self.records)

    def labels(self) -> list[str]:
        return [r.label for r in self.records]


@contextmanager
def track():
    counter = AllocationCounter()
    active = _active()
    active.append(counter)
    try:
        yield counter
    finally:
        active.remove(counter)


def record(label: str, arr: np.ndarray, persistent: bool = True) -> np.ndarray:
    active = _active()
    if active:
        rec = Allocation(label, tuple(arr.shape), int(arr.nbytes), persistent)
        for counter in active:
            counter.records.append(rec)
    return arr


def zeros(shape, dtype=np.float64, label: str = "buffer", persistent: bool = True) -> np.ndarray:
    return record(label, np.zeros(shape, dtype=dtype), persistent)


def empty(shape, dtype=np.float64, label: str = "buffer", persistent: bool = True) -> np.ndarray:
    return record(label, np.empty(shape, dtype=dtype), persistent)
