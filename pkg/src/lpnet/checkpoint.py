"""Binary weight checkpoints.

Layout (all integers little-endian)::

    b"LPNW"  version:u16
    repeated: level:u16 rows:u32 cols:u32  rows*cols float64 (row-major)

Forward weights come first, ``A_0 .. A_{L-1}`` with ``level`` = 0..L-1.
Backward weights follow, ``B_1 .. B_{L-1}`` with ``level`` = 1..L-1; the
first header whose level does not increase marks the start of the backward
block. Tied checkpoints have no backward block.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .state import WeightSet

MAGIC = b"LPNW"
VERSION = 1
_HEADER = struct.Struct("<HII")


class CorruptCheckpoint(ValueError):
    pass


def dumps(weights: WeightSet) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for level, a in enumerate(weights.A):
        parts.append(_matrix_bytes(level, a))
    if weights.B is not None:
        for level, b in enumerate(weights.B, start=1):
            parts.append(_matrix_bytes(level, b))
    return b"".join(parts)


def _matrix_bytes(level: int, m: np.ndarray) -> bytes:
    rows, cols = m.shape
    body = np.ascontiguousarray(m, dtype="<f8").tobytes(order="C")
    return _HEADER.pack(level, rows, cols) + body


def loads(blob: bytes) -> WeightSet:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    pos = 6
    A, B = [], []
    prev = -1
    in_backward = False
    while pos < len(blob):
        if pos + _HEADER.size > len(blob):
            raise CorruptCheckpoint("unexpected EOF in matrix header")
        level, rows, cols = _HEADER.unpack_from(blob, pos)
        pos += _HEADER.size
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise CorruptCheckpoint("unexpected EOF in matrix body")
        m = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
        if not in_backward and level <= prev:
            in_backward = True
            prev = 0
        target = B if in_backward else A
        expected = len(target) + (1 if in_backward else 0)
        if level != expected:
            raise CorruptCheckpoint(f"unexpected matrix level {level}, expected {expected}")
        target.append(m)
        prev = level
    if not A:
        raise CorruptCheckpoint("checkpoint holds no matrices")
    if B and len(B) != len(A) - 1:
        raise CorruptCheckpoint(f"expected {len(A) - 1} backward matrices, found {len(B)}")
    return WeightSet(A=A, B=B or None)


def save(weights: WeightSet, path) -> None:
    Path(path).write_bytes(dumps(weights))


def load(path) -> WeightSet:
    return loads(Path(path).read_bytes())
