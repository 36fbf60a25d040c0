"""Single-file NIfTI-1 (``.nii``) reading and writing.

Only the fields this package needs are interpreted: dimensions, datatype,
pixdim spacing, intensity scaling and a translation-only placement taken from
the sform (or qform offsets). Orientation is assumed axis aligned.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from ..core.types import LabelVolume, Volume3

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_CODES = {np.dtype(v): k for k, v in DATATYPES.items()}

# (offset, struct code) of the fields that are read or written
_F = {
    "sizeof_hdr": (0, "i"),
    "dim": (40, "8h"),
    "datatype": (70, "h"),
    "bitpix": (72, "h"),
    "pixdim": (76, "8f"),
    "vox_offset": (108, "f"),
    "scl_slope": (112, "f"),
    "scl_inter": (116, "f"),
    "qform_code": (252, "h"),
    "sform_code": (254, "h"),
    "qoffset": (268, "3f"),
    "srow_x": (280, "4f"),
    "srow_y": (296, "4f"),
    "srow_z": (312, "4f"),
    "magic": (344, "4s"),
}


class NiftiFormatError(ValueError):
    """Malformed or unsupported file; ``offset`` is the byte position at fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class NiftiHeader:
    dims: tuple[int, ...]
    datatype: int
    pixdim: tuple[float, ...]
    scl_slope: float
    scl_inter: float
    vox_offset: int
    magic: bytes
    endian: str = "<"
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def spacing(self) -> tuple[float, float, float]:
        sp = [abs(p) if p != 0 else 1.0 for p in self.pixdim[1:4]]
        return tuple(sp)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(DATATYPES[self.datatype]).newbyteorder(self.endian)


def _get(buf, endian, name):
    off, code = _F[name]
    vals = struct.unpack_from(endian + code, buf, off)
    return vals if len(vals) > 1 else vals[0]


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise NiftiFormatError(f"file is {len(buf)} bytes, shorter than the {HEADER_SIZE}-byte header",
                               len(buf))
    if struct.unpack_from("<i", buf, 0)[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise NiftiFormatError("sizeof_hdr is not 348 in either byte order", 0)
    magic = _get(buf, endian, "magic")
    if magic != MAGIC:
        kind = "two-file (ni1) NIfTI is not supported" if magic == b"ni1\x00" else f"bad magic {magic!r}"
        raise NiftiFormatError(kind, _F["magic"][0])
    dim = _get(buf, endian, "dim")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"dim[0] = {ndim} is out of range", _F["dim"][0])
    dims = tuple(int(d) for d in dim[1:ndim + 1])
    if any(d < 1 for d in dims):
        raise NiftiFormatError(f"non-positive dimension in {dims}", _F["dim"][0])
    if any(d != 1 for d in dims[3:]):
        raise NiftiFormatError(f"only 3-D volumes are supported, got dims {dims}", _F["dim"][0])
    datatype = _get(buf, endian, "datatype")
    if datatype not in DATATYPES:
        raise NiftiFormatError(f"unsupported datatype code {datatype}", _F["datatype"][0])
    vox_offset = _get(buf, endian, "vox_offset")
    if vox_offset < HEADER_SIZE or vox_offset != int(vox_offset):
        raise NiftiFormatError(f"invalid vox_offset {vox_offset}", _F["vox_offset"][0])
    if _get(buf, endian, "sform_code") > 0:
        origin = (_get(buf, endian, "srow_x")[3], _get(buf, endian, "srow_y")[3],
                  _get(buf, endian, "srow_z")[3])
    else:
        origin = _get(buf, endian, "qoffset")
    return NiftiHeader(
        dims=(dims + (1, 1, 1))[:3],
        datatype=int(datatype),
        pixdim=tuple(float(p) for p in _get(buf, endian, "pixdim")),
        scl_slope=float(_get(buf, endian, "scl_slope")),
        scl_inter=float(_get(buf, endian, "scl_inter")),
        vox_offset=int(vox_offset),
        magic=magic,
        endian=endian,
        origin=tuple(float(o) for o in origin),
    )


def read_nifti(source):
    """Parse a ``.nii`` file from a path or a bytes object.

    Returns ``(volume, header)``. Integer files without intensity scaling load
    as :class:`LabelVolume`; everything else loads as a float64 :class:`Volume3`.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        buf = bytes(source)
    else:
        with open(source, "rb") as fh:
            buf = fh.read()
    hdr = parse_header(buf)
    n = int(np.prod(hdr.dims))
    need = hdr.vox_offset + n * hdr.dtype.itemsize
    if len(buf) < need:
        raise NiftiFormatError(f"payload truncated: need {need} bytes, file has {len(buf)}", len(buf))
    raw = np.frombuffer(buf, dtype=hdr.dtype, count=n, offset=hdr.vox_offset)
    arr = raw.reshape(hdr.dims, order="F")
    scaled = hdr.scl_slope != 0 and not (hdr.scl_slope == 1 and hdr.scl_inter == 0)
    if hdr.dtype.kind in "iu" and not scaled:
        return LabelVolume(arr.astype(np.int32), hdr.spacing, hdr.origin), hdr
    data = arr.astype(np.float64)
    if scaled:
        data = data * hdr.scl_slope + hdr.scl_inter
    return Volume3(data, hdr.spacing, hdr.origin), hdr


def encode_nifti(v, dtype=None, endian: str = "<") -> bytes:
    """Serialize a :class:`Volume3` or :class:`LabelVolume` to ``.nii`` bytes."""
    data = np.asarray(v.data)
    if any(d > 32767 for d in data.shape):
        raise ValueError(f"dims {data.shape} exceed the NIfTI-1 limit of 32767")
    if dtype is None:
        if isinstance(v, LabelVolume):
            dtype = np.uint8 if data.max(initial=0) <= 255 else np.int16
        else:
            dtype = np.float64
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise ValueError(f"unsupported output dtype {dtype}")
    if dtype.kind in "iu" and data.max(initial=0) > np.iinfo(dtype).max:
        raise ValueError(f"values exceed the range of {dtype}")
    buf = bytearray(VOX_OFFSET)

    def put(name, *vals):
        off, code = _F[name]
        struct.pack_into(endian + code, buf, off, *vals)

    sp = [float(s) for s in v.spacing]
    org = [float(o) for o in v.origin]
    put("sizeof_hdr", HEADER_SIZE)
    put("dim", 3, *data.shape, 1, 1, 1, 1)
    put("datatype", _CODES[dtype])
    put("bitpix", dtype.itemsize * 8)
    put("pixdim", 1.0, *sp, 0.0, 0.0, 0.0, 0.0)
    put("vox_offset", float(VOX_OFFSET))
    put("scl_slope", 0.0)
    put("scl_inter", 0.0)
    put("qform_code", 0)
    put("sform_code", 1)
    put("qoffset", *org)
    put("srow_x", sp[0], 0.0, 0.0, org[0])
    put("srow_y", 0.0, sp[1], 0.0, org[1])
    put("srow_z", 0.0, 0.0, sp[2], org[2])
    put("magic", MAGIC)
    payload = np.asarray(data, dtype=dtype.newbyteorder(endian)).ravel(order="F").tobytes()
    return bytes(buf) + payload


def write_nifti(v, path, dtype=None) -> None:
    if not path:
        raise OSError("empty output path")
    blob = encode_nifti(v, dtype)
    with open(os.fspath(path), "wb") as fh:
        fh.write(blob)
