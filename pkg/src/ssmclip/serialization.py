"""Binary tensor records.

Each record is little-endian: ``u32`` name length, UTF-8 name, ``u32`` rank,
``u64`` per dimension, ``u8`` dtype tag (0 = f32, 1 = f64), then the raw
row-major values.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor_record(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in DTYPE_TAGS:
        raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
    tag = DTYPE_TAGS[arr.dtype]
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<B", tag))
    fh.write(np.ascontiguousarray(arr, dtype=TAG_DTYPES[tag]).tobytes())


def read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_record(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", read_exact(fh, 4))
    name = read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", read_exact(fh, 8 * rank))
    (tag,) = struct.unpack("<B", read_exact(fh, 1))
    if tag not in TAG_DTYPES:
        raise ValueError(f"{name}: unknown dtype tag {tag}")
    dt = TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(read_exact(fh, count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))
