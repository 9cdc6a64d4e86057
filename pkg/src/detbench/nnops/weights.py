"""
Weight file I/O.

Layout (little-endian):

    b"DBW1"  uint32 tensor_count
    per tensor: uint32 name_len, name (utf-8), uint32 rank, rank * uint32 dims,
                float32 data (row-major)

The file holds nothing else, so its size is exactly
``weight_file_overhead(...) + 4 * total_params``.
"""

from __future__ import annotations

import os
import struct
from typing import Iterable, Mapping

import numpy as np

from detbench.errors import InputError

MAGIC = b"DBW1"


def weight_file_overhead(named_shapes: Iterable[tuple[str, tuple[int, ...]]]) -> int:
    """Bytes of header and per-tensor metadata, excluding the float32 payload."""
    total = len(MAGIC) + 4
    for name, shape in named_shapes:
        total += 4 + len(name.encode("utf-8")) + 4 + 4 * len(shape)
    return total


def encode_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(weights))]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise InputError("not a DBW1 weight file (bad magic)")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise InputError(f"weight file truncated in tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 4 * size
    except struct.error as exc:
        raise InputError(f"weight file truncated: {exc}") from None
    if pos != len(data):
        raise InputError(f"{len(data) - pos} trailing bytes in weight file")
    return out


def save_weights(path: str | os.PathLike, weights: Mapping[str, np.ndarray]) -> int:
    data = encode_weights(weights)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_weights(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
