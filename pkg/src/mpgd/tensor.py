"""Dense float64 tensors and the ``MPGT`` binary format.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in C order.
The binary layout is::

    b"MPGT" | u32 rank | u32 dims[rank] | f64 payload (little endian, row major)
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError, NonFiniteError

MAGIC = b"MPGT"
PathLike = Union[str, os.PathLike]


def as_tensor(data, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``data`` to a contiguous float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if check_finite and not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = as_tensor(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if head != MAGIC:
        raise FormatError(f"bad magic bytes {head!r}, expected {MAGIC!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated header")
    (rank,) = struct.unpack("<I", raw)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated shape")
    shape = struct.unpack(f"<{rank}I", raw) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated payload: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path: PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
