"""Raw little-endian float64 arrays with a JSON sidecar.

``write_raw("u.raw", arr)`` writes the C-ordered payload to ``u.raw`` and the
metadata ``{dims, channels, spacing, origin, dtype, byte_order}`` to ``u.raw.json``.
"""

from __future__ import annotations

import json
import os

import numpy as np


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def write_raw(path, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> None:
    if not path:
        raise OSError("empty output path")
    arr = np.asarray(data, dtype="<f8")
    if arr.ndim not in (3, 4):
        raise ValueError(f"expected a 3-D volume or 4-D field, got shape {arr.shape}")
    meta = {
        "dims": [int(d) for d in arr.shape[:3]],
        "channels": int(arr.shape[3]) if arr.ndim == 4 else 1,
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "dtype": "float64",
        "byte_order": "little",
    }
    with open(os.fspath(path), "wb") as fh:
        fh.write(np.ascontiguousarray(arr).tobytes())
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_raw(path):
    """Returns ``(array, meta)``; multi-channel data has a trailing channel axis."""
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    try:
        dims = tuple(int(d) for d in meta["dims"])
        channels = int(meta.get("channels", 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed sidecar for {path}: {exc}") from None
    shape = dims if channels == 1 else dims + (channels,)
    with open(os.fspath(path), "rb") as fh:
        buf = fh.read()
    expected = int(np.prod(shape)) * 8
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64), meta
