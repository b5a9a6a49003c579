"""SPVT binary container for visual embedding matrices.

Layout (little-endian): magic ``b"SPVT"``, version ``u16``, count ``u32``,
then per matrix ``L_v u32``, ``D u32`` and ``L_v * D`` float32 values in
row-major order. Values are widened to float64 on load.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import EmbeddingFormatError

MAGIC = b"SPVT"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_MATRIX = struct.Struct("<II")


def encode_embeddings(matrices):
    parts = [_HEADER.pack(MAGIC, VERSION, len(matrices))]
    for m in matrices:
        m = np.asarray(m)
        if m.ndim != 2:
            raise EmbeddingFormatError(f"each matrix must be 2-D, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise EmbeddingFormatError("refusing to write non-finite values")
        parts.append(_MATRIX.pack(*m.shape))
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_embeddings(data):
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(data)}"
        )
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}")
    offset = _HEADER.size
    out = []
    for i in range(count):
        if len(data) < offset + _MATRIX.size:
            raise EmbeddingFormatError(
                f"truncated file: matrix {i} header needs {offset + _MATRIX.size} bytes, got {len(data)}"
            )
        rows, cols = _MATRIX.unpack_from(data, offset)
        offset += _MATRIX.size
        end = offset + rows * cols * 4
        if len(data) < end:
            raise EmbeddingFormatError(
                f"truncated file: expected {end} bytes for matrix {i}, got {len(data)}"
            )
        m = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        if not np.all(np.isfinite(m)):
            raise EmbeddingFormatError(f"matrix {i} contains NaN or Inf")
        out.append(m.astype(np.float64))
        offset = end
    if offset != len(data):
        raise EmbeddingFormatError(f"{len(data) - offset} trailing bytes after {count} matrices")
    return out


def write_embeddings(path, matrices):
    with open(path, "wb") as fh:
        fh.write(encode_embeddings(matrices))


def load_embeddings(path):
    with open(path, "rb") as fh:
        return decode_embeddings(fh.read())
