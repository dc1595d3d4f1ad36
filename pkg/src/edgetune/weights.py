"""ETW1 weight files: a flat list of named, typed, row-major tensors.

Layout (little-endian)::

    b"ETW1" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | u64 dims[rank] | u8 dtype | payload )

dtype tag 0 is float32, 1 is float64.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ETW1"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class WeightFormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise WeightFormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", _TAGS[dt]))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    if len(view) < 12 or bytes(view[:4]) != MAGIC:
        raise WeightFormatError("not an ETW1 file")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported ETW1 version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", view, pos)
            pos += 1
            if tag not in _DTYPES:
                raise WeightFormatError(f"{name}: unknown dtype tag {tag}")
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise WeightFormatError(f"{name}: truncated payload")
            arr = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
            pos += nbytes
            out[name] = arr
    except struct.error as exc:
        raise WeightFormatError("truncated ETW1 header") from exc
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
