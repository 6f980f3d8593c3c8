"""DOTF binary tensor container.

Layout (little-endian)::

    b"DOTF" | version u16 | dtype u8 | rank u8 | dims u32[rank] | payload

The payload is the row-major array data. Dtype codes: 1 = float32,
2 = int32, 3 = uint8.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DOTF"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4"), 3: np.dtype("u1")}
_HEAD = struct.Struct("<4sHBB")


class TensorFormatError(ValueError):
    """Malformed DOTF data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "b":
        arr = arr.astype(np.uint8)
    code = next((c for c, dt in DTYPES.items()
                 if (arr.dtype.kind, arr.dtype.itemsize) == (dt.kind, dt.itemsize)), None)
    if code is None:
        raise TypeError(f"DOTF stores float32, int32 or uint8, not {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank above 255")
    header = _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEAD.size:
        raise TensorFormatError(f"header needs {_HEAD.size} bytes, file has {len(data)}", len(data))
    magic, version, code, rank = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", 6)
    dims_end = _HEAD.size + 4 * rank
    if len(data) < dims_end:
        raise TensorFormatError(f"dims need {dims_end} bytes, file has {len(data)}", len(data))
    dims = struct.unpack_from(f"<{rank}I", data, _HEAD.size)
    dtype = DTYPES[code]
    expected = dims_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise TensorFormatError(f"declared length {expected} bytes, actual {len(data)}",
                                min(len(data), expected))
    return np.frombuffer(data, dtype=dtype, offset=dims_end).reshape(dims).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_tensor(array, path) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
