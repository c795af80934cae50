"""EDTF binary tensor files.

Layout: magic ``EDTF``, u32 version (1), u8 dtype code (0=f32, 1=f64),
u32 ndim, ndim x u64 dims, then the row-major little-endian payload.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"EDTF"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float32:
        code = 0
    elif array.dtype == np.float64:
        code = 1
    else:
        raise TypeError(f"EDTF stores f32/f64 only, got {array.dtype}")
    header = MAGIC + struct.pack("<IBI", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_CODES[code]).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise DataError("not an EDTF file (bad magic)")
    version, code, ndim = struct.unpack_from("<IBI", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported EDTF version {version}")
    if code not in _CODES:
        raise DataError(f"unknown EDTF dtype code {code}")
    offset = 4 + struct.calcsize("<IBI")
    dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    dtype = _CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(blob) - offset != count * dtype.itemsize:
        raise DataError(f"EDTF payload size mismatch: expected {count * dtype.itemsize} bytes, got {len(blob) - offset}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims)
    return data.astype(dtype.newbyteorder("="))


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temporary sibling file and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
