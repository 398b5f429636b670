"""Reader and writer for the CPLX1 binary matrix format.

Layout: 8-byte magic ``b"CPLX1\\0\\0\\0"``, little-endian ``u64`` rows and
cols, then row-major interleaved real/imaginary little-endian float64.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CPLX1\x00\x00\x00"
_HEADER = struct.Struct("<8sQQ")


class FormatError(ValueError):
    pass


def dumps(matrix) -> bytes:
    a = np.asarray(matrix, dtype=complex)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise FormatError(f"CPLX1 stores 1-D or 2-D arrays, got ndim={a.ndim}")
    body = np.ascontiguousarray(a, dtype="<c16").tobytes()
    return _HEADER.pack(MAGIC, a.shape[0], a.shape[1]) + body


def loads(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("truncated CPLX1 header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + 16 * rows * cols
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {rows}x{cols}, got {len(data)}")
    flat = np.frombuffer(data, dtype="<c16", offset=_HEADER.size)
    return flat.reshape(rows, cols).astype(complex)


def write(path: str | os.PathLike, matrix) -> None:
    with open(path, "wb") as f:
        f.write(dumps(matrix))


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return loads(f.read())
