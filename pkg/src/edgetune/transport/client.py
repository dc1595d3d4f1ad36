"""Edge side: request gathered features and meter what crossed the wire."""

from __future__ import annotations

import hashlib
import socket
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..gather import MB, GatherMode, GatherSpec
from ..tensor import Tensor
from .protocol import (
    K_ALL,
    FeatureFrame,
    FrameError,
    FrameType,
    decode_frame,
    encode_frame,
    read_frame,
)
from .service import FeatureService, parse_address


class TransportError(Exception):
    pass


class ClientTimeout(TransportError):
    pass


class ClientDecodeError(TransportError):
    pass


class ServerError(TransportError):
    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class TransferRecord:
    mode: str
    request_bytes: int
    response_bytes: int
    payload_bytes: int
    wall_time: float


def request_frame(image: np.ndarray, spec: GatherSpec) -> FeatureFrame:
    image = np.ascontiguousarray(image)
    input_id = hashlib.sha256(image.tobytes()).digest()
    k = K_ALL if spec.k is None else spec.k
    g = spec.g if spec.mode is GatherMode.WINDOWED else 0
    return FeatureFrame(FrameType.REQUEST, input_id, image, spec.mode, k, g)


class FeatureClient:
    """Shared request/response logic; subclasses move the bytes."""

    def __init__(self):
        self.records: list[TransferRecord] = []

    def _exchange(self, raw: bytes) -> tuple[FeatureFrame, int]:
        raise NotImplementedError

    def fetch_features(self, image, spec: GatherSpec) -> tuple[Tensor, TransferRecord]:
        image = image.data if isinstance(image, Tensor) else np.asarray(image)
        raw = encode_frame(request_frame(image, spec))
        start = time.perf_counter()
        frame, nresp = self._exchange(raw)
        elapsed = time.perf_counter() - start
        if frame.frame_type is FrameType.ERROR:
            raise ServerError(frame.k, frame.payload.tobytes().decode("utf-8", "replace"))
        if frame.frame_type is not FrameType.FEATURE:
            raise ClientDecodeError(f"unexpected {frame.frame_type.name} frame")
        record = TransferRecord(GatherMode(spec.mode).value, len(raw), nresp, frame.payload_bytes, elapsed)
        self.records.append(record)
        return Tensor(frame.payload, dtype=frame.payload.dtype), record

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackClient(FeatureClient):
    """In-process transport: the same frames, no sockets."""

    def __init__(self, service: FeatureService):
        super().__init__()
        self.service = service

    def _exchange(self, raw: bytes) -> tuple[FeatureFrame, int]:
        resp = self.service.handle(raw)
        try:
            return decode_frame(resp), len(resp)
        except FrameError as exc:
            raise ClientDecodeError(str(exc)) from exc


class SocketClient(FeatureClient):
    """One persistent TCP connection; reconnects and retries on loss."""

    def __init__(self, address: str, timeout: float = 30.0, retries: int = 3):
        super().__init__()
        self.address = parse_address(address)
        self.timeout = timeout
        self.retries = retries
        self._sock: socket.socket | None = None
        self._rfile = None
        self._lock = threading.Lock()

    def _connect(self) -> None:
        self.close()
        self._sock = socket.create_connection(self.address, timeout=self.timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")

    def _exchange(self, raw: bytes) -> tuple[FeatureFrame, int]:
        with self._lock:
            last: Exception | None = None
            for _ in range(self.retries + 1):
                try:
                    if self._sock is None:
                        self._connect()
                    self._sock.sendall(raw)
                    return read_frame(self._rfile)
                except socket.timeout as exc:
                    self.close()
                    raise ClientTimeout(f"no response within {self.timeout}s") from exc
                except FrameError as exc:
                    self.close()
                    raise ClientDecodeError(str(exc)) from exc
                except (EOFError, OSError) as exc:
                    # requests are pure, so resending is safe
                    self.close()
                    last = exc
            raise TransportError(f"connection to {self.address} failed: {last}")

    def close(self) -> None:
        if self._rfile is not None:
            self._rfile.close()
            self._rfile = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def overhead_report(records: Iterable[TransferRecord]) -> list[dict]:
    """Mean payload bytes per image for each gather mode, in MB (2**20 bytes)."""
    records = list(records)
    if not records:
        raise ValueError("overhead report needs at least one transfer record")
    by_mode: dict[str, list[int]] = defaultdict(list)
    for rec in records:
        by_mode[rec.mode].append(rec.payload_bytes)
    rows = []
    for mode, sizes in by_mode.items():
        mean_bytes = sum(sizes) / len(sizes)
        rows.append({"mode": mode, "images": len(sizes), "bytes_per_image": mean_bytes, "mb_per_image": mean_bytes / MB})
    return rows
