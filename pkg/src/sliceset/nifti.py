"""Minimal single-file NIfTI-1 reader/writer.

Covers exactly what the rest of the package needs: 3-D volumes in uint8,
int16, or float32, plain or gzip-compressed, either byte order (sniffed from
the header-size field).  Orientation metadata is read but not acted on —
inputs are assumed already resampled to a common grid.  Files are written
little-endian with data at offset 352 (header + empty extension flag).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .data import Volume

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
VOX_OFFSET = 352

# NIfTI-1 datatype codes we accept.
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_DTYPE_CODES = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16),
                np.dtype(np.float32): (16, 32)}

_GZIP_MAGIC = b"\x1f\x8b"


class NiftiFormatError(ValueError):
    """Raised when bytes are not a valid single-file NIfTI-1."""


class NiftiUnsupportedError(ValueError):
    """Raised for well-formed NIfTI-1 files outside the supported subset."""


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def load_nifti(path) -> Volume:
    """Read a 3-D single-file NIfTI-1 (.nii or .nii.gz) into a Volume.

    Voxels come back as float32 in Fortran (column-major) axis order, so
    index [i, j, k] matches the on-disk (x, y, z) convention.
    """
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(
            f"{path}: file has {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header")

    # The header-size field doubles as an endianness marker.
    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    if sizeof_hdr == HEADER_SIZE:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        end = ">"
    else:
        raise NiftiFormatError(f"{path}: header size field is {sizeof_hdr}, expected {HEADER_SIZE}")

    magic = raw[344:348]
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"{path}: magic {magic!r} is not single-file NIfTI-1 {MAGIC_SINGLE!r}")

    dim = struct.unpack(end + "8h", raw[40:56])
    if dim[0] != 3:
        raise NiftiUnsupportedError(f"{path}: {dim[0]}-D image; only 3-D volumes are supported")
    extents = dim[1], dim[2], dim[3]
    if any(e < 1 for e in extents):
        raise NiftiFormatError(f"{path}: non-positive extents {extents}")

    (datatype,) = struct.unpack(end + "h", raw[70:72])
    if datatype not in _DTYPES:
        raise NiftiUnsupportedError(
            f"{path}: datatype code {datatype} not in supported set {sorted(_DTYPES)}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(end)

    (vox_offset,) = struct.unpack(end + "f", raw[108:112])
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET
    count = extents[0] * extents[1] * extents[2]
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiFormatError(
            f"{path}: need {need} bytes for {extents} voxels at offset {offset}, file has {len(raw)}")

    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    voxels = flat.reshape(extents, order="F").astype(np.float32)

    scl_slope, scl_inter = struct.unpack(end + "2f", raw[112:120])
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        voxels = voxels * np.float32(scl_slope) + np.float32(scl_inter)

    return Volume(voxels=voxels, subject_id=Path(path).stem.removesuffix(".nii"))


def save_nifti(path, volume: Volume, dtype=np.float32):
    """Write a Volume as a little-endian single-file NIfTI-1; .gz paths are compressed."""
    np_dtype = np.dtype(dtype)
    if np_dtype not in _DTYPE_CODES:
        raise NiftiUnsupportedError(
            f"cannot write dtype {np_dtype}; supported: {sorted(str(d) for d in _DTYPE_CODES)}")
    code, bitpix = _DTYPE_CODES[np_dtype]
    extents = volume.extents

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *extents, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, code, bitpix)
    struct.pack_into("<8f", header, 76, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    header[344:348] = MAGIC_SINGLE

    data = np.ascontiguousarray(
        volume.voxels.astype(np_dtype.newbyteorder("<")), dtype=np_dtype.newbyteorder("<"))
    payload = bytes(header) + b"\x00\x00\x00\x00" + data.tobytes(order="F")

    path = Path(path)
    if path.name.endswith(".gz"):
        # mtime pinned so identical volumes give identical files.
        path.write_bytes(gzip.compress(payload, mtime=0))
    else:
        path.write_bytes(payload)
