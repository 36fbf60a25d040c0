"""Containers for volumes, warps and transforms.

All spatial arrays are indexed ``[i0, i1, i2]``. A warp stores its three
displacement components in a trailing axis; component ``c`` moves along
array axis ``c``. Coordinates are normalized per axis so that the first
voxel center sits at -1 and the last at +1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _as_vec3(value, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


@dataclass
class Volume3:
    """A scalar 3-D image with physical spacing and origin (mm)."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"Volume3 needs a non-empty 3-D array, got shape {self.data.shape}")
        self.spacing = _as_vec3(self.spacing, "spacing")
        self.origin = _as_vec3(self.origin, "origin")
        if np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing.copy(), self.origin.copy())


@dataclass
class WarpField:
    """Per-voxel displacement in normalized coordinates, shape ``(n0, n1, n2, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"WarpField needs shape (n0, n1, n2, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("WarpField contains non-finite values")

    @classmethod
    def zeros(cls, dims, dtype=np.float64) -> "WarpField":
        return cls(np.zeros(tuple(dims) + (3,), dtype=dtype))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])


@dataclass
class AffineMap:
    """``x -> matrix @ x + translation`` in normalized coordinates."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        self.translation = _as_vec3(self.translation, "translation")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("affine matrix must be finite")

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class DomainBounds:
    """Normalized coordinates of the first and last voxel centers of a lattice.

    ``x_min == x_max`` is allowed only on an axis with a single voxel.
    """

    x_min: np.ndarray
    x_max: np.ndarray

    def __post_init__(self):
        self.x_min = _as_vec3(self.x_min, "x_min")
        self.x_max = _as_vec3(self.x_max, "x_max")
        if np.any(self.x_min > self.x_max):
            raise ValueError(f"x_min must not exceed x_max: {self.x_min} vs {self.x_max}")

    @classmethod
    def full(cls) -> "DomainBounds":
        return cls(-np.ones(3), np.ones(3))

    def coordinates(self, dims, axis: int) -> np.ndarray:
        """Voxel-center coordinates along ``axis`` for a lattice of ``dims``."""
        n = dims[axis]
        if n == 1:
            return np.array([self.x_min[axis]])
        step = (self.x_max[axis] - self.x_min[axis]) / (n - 1)
        return self.x_min[axis] + step * np.arange(n)


def index_to_normalized(index, n: int):
    """Normalized coordinate of voxel ``index`` on an axis with ``n`` voxels."""
    return -1.0 + 2.0 * np.asarray(index, dtype=np.float64) / (n - 1)


@dataclass
class LabelVolume:
    """Integer label map; 0 is background."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"LabelVolume needs a non-empty 3-D array, got shape {data.shape}")
        if data.dtype.kind not in "iu":
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise ValueError("labels must be integers")
        if data.size and data.min() < 0:
            raise ValueError("labels must be non-negative")
        self.data = data.astype(np.int32, copy=False)
        self.spacing = _as_vec3(self.spacing, "spacing")
        self.origin = _as_vec3(self.origin, "origin")
        if np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v > 0]

    def to_volume(self) -> Volume3:
        return Volume3(self.data.astype(np.float64), self.spacing.copy(), self.origin.copy())
