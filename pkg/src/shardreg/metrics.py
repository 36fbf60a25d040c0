"""Label-overlap and surface-distance scores."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def _labels_of(a) -> np.ndarray:
    return np.asarray(a.data if hasattr(a, "data") else a)


def _pair(a, b):
    a = _labels_of(a)
    b = _labels_of(b)
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    return a, b


def _union_labels(a, b) -> list[int]:
    return sorted(int(v) for v in np.union1d(np.unique(a), np.unique(b)) if v > 0)


def dice(L_a, L_b) -> tuple[dict[int, float], float]:
    """Per-label Dice for labels > 0 present in either map, and their mean."""
    a, b = _pair(L_a, L_b)
    labels = _union_labels(a, b)
    if not labels:
        raise ValueError("both label maps are empty")
    per = {}
    for lab in labels:
        ma = a == lab
        mb = b == lab
        per[lab] = 2.0 * np.count_nonzero(ma & mb) / (np.count_nonzero(ma) + np.count_nonzero(mb))
    return per, float(np.mean(list(per.values())))


def inv_dice(L_a, L_b, weighting: str = "fixed") -> float:
    """Dice averaged with per-label weights inversely proportional to label volume.

    ``weighting="fixed"`` uses the label's volume in ``L_a`` (falling back to
    ``L_b`` when absent there); ``"union"`` uses the volume of the union,
    which makes the score symmetric in its arguments.
    """
    if weighting not in ("fixed", "union"):
        raise ValueError(f"unknown weighting {weighting!r}")
    a, b = _pair(L_a, L_b)
    per, _ = dice(a, b)
    num = 0.0
    den = 0.0
    for lab, d in per.items():
        ma = a == lab
        mb = b == lab
        if weighting == "union":
            vol = np.count_nonzero(ma | mb)
        else:
            vol = np.count_nonzero(ma) or np.count_nonzero(mb)
        w = 1.0 / vol
        num += w * d
        den += w
    return float(num / den)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbor outside it (the volume edge counts)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def _directed(src: np.ndarray, dst_tree: cKDTree) -> float:
    d, _ = dst_tree.query(src)
    d = np.sort(d)
    k = max(int(np.floor(0.9 * len(d))), 1)
    return float(d[:k].mean())


def _hd90_mask(ma, mb, spacing) -> float:
    if not ma.any() or not mb.any():
        raise ValueError("HD90 is undefined for an empty mask")
    pa = np.argwhere(surface(ma)) * spacing
    pb = np.argwhere(surface(mb)) * spacing
    return max(_directed(pa, cKDTree(pb)), _directed(pb, cKDTree(pa)))


def hd90_cumulative(L_a, L_b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Cumulative 90th-percentile Hausdorff distance in physical units.

    Per direction, the smallest 90% of surface-to-surface distances are averaged
    (at least one); the larger direction is returned. Boolean masks are scored
    directly; label maps average over labels present in both maps.
    """
    a, b = _pair(L_a, L_b)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    if a.dtype == bool or b.dtype == bool:
        return _hd90_mask(a.astype(bool), b.astype(bool), spacing)
    common = sorted(set(int(v) for v in np.unique(a) if v > 0) & set(int(v) for v in np.unique(b) if v > 0))
    if not common:
        raise ValueError("HD90 is undefined: no label is present in both maps")
    return float(np.mean([_hd90_mask(a == lab, b == lab, spacing) for lab in common]))
