"""Reader and writer for the ``SFIR`` binary tensor format.

Layout: magic ``b"SFIR"``, version byte ``0x01``, dtype byte (``0x01`` f32,
``0x02`` u8), rank byte, ``rank`` little-endian u32 dims, then the row-major
little-endian payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFIR"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES = {np.dtype("<f4"): 1, np.dtype("u1"): 2}


class TensorFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        dt = np.dtype("u1")
    elif np.issubdtype(array.dtype, np.floating):
        dt = np.dtype("<f4")
    else:
        raise TensorFormatError(f"unsupported dtype {array.dtype}")
    if array.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODES[dt], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dt).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    dt = _DTYPES[code]
    offset = 7 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != n * dt.itemsize:
        raise TensorFormatError(f"payload size {len(buf) - offset} does not match dims {dims}")
    return np.frombuffer(buf, dtype=dt, count=n, offset=offset).reshape(dims).copy()


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
