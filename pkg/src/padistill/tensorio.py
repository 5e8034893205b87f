"""Binary tensor format shared by every persisted artifact.

Layout (all little-endian)::

    u32 rank | u64 extent * rank | f64 payload (row-major)
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

_RANK = struct.Struct("<I")


class FormatError(ValueError):
    """Raised when a persisted file is malformed, truncated or mismatched."""


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def write_tensor(fh: BinaryIO, array) -> None:
    a = np.asarray(array, dtype="<f8")  # tobytes() is row-major whatever the strides
    fh.write(_RANK.pack(a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = _RANK.unpack(_read_exact(fh, 4, "tensor header"))
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "tensor extents"))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, 8 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
