"""MIET frame codec.

One frame, little-endian throughout::

    magic   4s   b"MIET"
    version u16
    type    u8   0 request, 1 feature, 2 error
    input   32s  sha256 of the raw image bytes
    mode    u8   gather mode code
    k       u16  layer cutoff (error frames: reason code)
    g       u16  window size
    dtype   u8   0 f32, 1 f64, 2 u8
    rank    u8
    dims    u64 * rank
    payload product(dims) * dtype size bytes, row-major
    crc32   u32  of payload

Request frames carry the image as payload; error frames carry a UTF-8
reason as a rank-1 u8 payload.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import BinaryIO

import numpy as np

from ..gather import GatherMode

MAGIC = b"MIET"
VERSION = 1
HEADER = struct.Struct("<4sHB32sBHHBB")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 1 << 30
MAX_ELEMENTS = (1 << 62) // 8
# k value meaning "every layer" in sum mode
K_ALL = 0xFFFF

MODE_CODES = {
    GatherMode.SUM: 0,
    GatherMode.STACK: 1,
    GatherMode.WINDOWED: 2,
    GatherMode.LAST_ONLY: 3,
    GatherMode.HEAD: 4,
}
CODE_MODES = {v: k for k, v in MODE_CODES.items()}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FrameType(IntEnum):
    REQUEST = 0
    FEATURE = 1
    ERROR = 2


class ErrorCode(IntEnum):
    MALFORMED = 1
    BAD_SPEC = 2
    BAD_IMAGE = 3
    INTERNAL = 4


class FrameError(ValueError):
    """Base class for frame decode failures."""


class BadMagic(FrameError):
    pass


class VersionMismatch(FrameError):
    pass


class ChecksumError(FrameError):
    pass


class Truncated(FrameError):
    pass


class MalformedFrame(FrameError):
    """Unknown type/mode/dtype code or trailing garbage."""


@dataclass(frozen=True)
class FeatureFrame:
    frame_type: FrameType
    input_id: bytes
    payload: np.ndarray
    mode: GatherMode = GatherMode.SUM
    k: int = 0
    g: int = 0
    version: int = VERSION

    @property
    def payload_bytes(self) -> int:
        return self.payload.nbytes

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureFrame):
            return NotImplemented
        return (
            self.frame_type == other.frame_type
            and self.input_id == other.input_id
            and self.mode == other.mode
            and (self.k, self.g, self.version) == (other.k, other.g, other.version)
            and self.payload.dtype == other.payload.dtype
            and self.payload.shape == other.payload.shape
            and self.payload.tobytes() == other.payload.tobytes()
        )

    __hash__ = None


def error_frame(code: ErrorCode, message: str, input_id: bytes = bytes(32)) -> FeatureFrame:
    payload = np.frombuffer(message.encode("utf-8"), dtype=np.uint8)
    return FeatureFrame(FrameType.ERROR, input_id, payload, k=int(code))


def encode_frame(f: FeatureFrame) -> bytes:
    arr = np.asarray(f.payload, order="C")
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    if dt not in DTYPE_CODES:
        raise MalformedFrame(f"unsupported payload dtype {arr.dtype}")
    if len(f.input_id) != 32:
        raise MalformedFrame("input_id must be 32 bytes")
    raw = arr.astype(dt, copy=False).tobytes()
    header = HEADER.pack(
        MAGIC, f.version, int(f.frame_type), f.input_id, MODE_CODES[GatherMode(f.mode)],
        f.k, f.g, DTYPE_CODES[dt], arr.ndim,
    )
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return b"".join((header, dims, raw, CRC.pack(zlib.crc32(raw))))


def _parse_header(buf: bytes):
    magic, version, ftype, input_id, mode, k, g, dtype, rank = HEADER.unpack(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"frame version {version}, expected {VERSION}")
    try:
        ftype = FrameType(ftype)
        mode = CODE_MODES[mode]
        dt = CODE_DTYPES[dtype]
    except (ValueError, KeyError) as exc:
        raise MalformedFrame(f"unknown code in header: {exc}") from exc
    return ftype, input_id, mode, k, g, dt, rank, version


def _check_dims(dims: tuple[int, ...]) -> None:
    # a zero dim makes the payload empty whatever the others say, but numpy
    # still refuses shapes whose nonzero extent overflows its index type
    if math.prod(d for d in dims if d) > MAX_ELEMENTS:
        raise MalformedFrame(f"dims {dims} are not addressable")


def _build(header, dims, raw: bytes, crc: bytes) -> FeatureFrame:
    ftype, input_id, mode, k, g, dt, _, version = header
    if zlib.crc32(raw) != CRC.unpack(crc)[0]:
        raise ChecksumError("payload crc32 mismatch")
    payload = np.frombuffer(raw, dtype=dt).reshape(dims)
    if dt.kind == "f":
        payload = payload.astype(dt.newbyteorder("="))
    return FeatureFrame(ftype, input_id, payload, mode, k, g, version)


def decode_frame(buf: bytes) -> FeatureFrame:
    buf = bytes(buf)
    if len(buf) < HEADER.size:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise BadMagic(f"bad magic {buf[:4]!r}")
        raise Truncated(f"{len(buf)} bytes is shorter than the frame header")
    header = _parse_header(buf[: HEADER.size])
    rank, dt = header[6], header[5]
    pos = HEADER.size
    if len(buf) < pos + 8 * rank:
        raise Truncated("frame ends inside dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    _check_dims(dims)
    pos += 8 * rank
    nbytes = math.prod(dims) * dt.itemsize
    end = pos + nbytes + CRC.size
    if len(buf) < end:
        raise Truncated(f"frame needs {end} bytes, got {len(buf)}")
    if len(buf) > end:
        raise MalformedFrame(f"{len(buf) - end} trailing bytes after frame")
    return _build(header, dims, buf[pos : pos + nbytes], buf[pos + nbytes : end])


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    need = n
    while need:
        chunk = stream.read(need)
        if not chunk:
            raise Truncated(f"stream closed with {need} of {n} bytes outstanding")
        chunks.append(chunk)
        need -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO, max_payload: int = MAX_PAYLOAD) -> tuple[FeatureFrame, int]:
    """Read one frame from a byte stream; returns the frame and its wire size.

    Raises EOFError if the stream closes cleanly before a new frame starts.
    """
    first = stream.read(HEADER.size)
    if not first:
        raise EOFError("stream closed")
    head = first if len(first) == HEADER.size else first + _read_exact(stream, HEADER.size - len(first))
    header = _parse_header(head)
    rank, dt = header[6], header[5]
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    _check_dims(dims)
    nbytes = math.prod(dims) * dt.itemsize
    if nbytes > max_payload:
        raise MalformedFrame(f"payload of {nbytes} bytes exceeds limit {max_payload}")
    raw = _read_exact(stream, nbytes)
    crc = _read_exact(stream, CRC.size)
    return _build(header, dims, raw, crc), HEADER.size + 8 * rank + nbytes + CRC.size
