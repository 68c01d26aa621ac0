"""TBF1 binary tensor files.

Layout: magic ``TBF1``, little-endian u32 rank, rank little-endian u32 dims,
then the row-major little-endian float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TBF1"


def dumps(tensor) -> bytes:
    arr = np.ascontiguousarray(tensor, dtype="<f8")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def loads(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError("not a TBF1 tensor (bad magic)")
    if len(blob) < 8:
        raise FormatError("truncated TBF1 header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    off = 8 + 4 * rank
    if len(blob) < off:
        raise FormatError("truncated TBF1 header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(blob) != off + 8 * count:
        raise FormatError(f"TBF1 payload holds {len(blob) - off} bytes, expected {8 * count}")
    return np.frombuffer(blob, dtype="<f8", offset=off, count=count).astype(np.float64).reshape(dims)


def save(path, tensor) -> None:
    Path(path).write_bytes(dumps(tensor))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
