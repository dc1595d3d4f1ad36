"""Cloud side: frozen backbone behind a content-addressed feature cache."""

from __future__ import annotations

import hashlib
import logging
import socketserver
import threading

import numpy as np

from ..backbone import FeatureSet, WeightStore, extract_features
from ..gather import GatherMode, GatherSpec, apply
from ..tensor import ContractError, Tensor
from .cache import FeatureCache
from .protocol import (
    ErrorCode,
    FeatureFrame,
    FrameError,
    FrameType,
    K_ALL,
    encode_frame,
    decode_frame,
    error_frame,
    read_frame,
)

log = logging.getLogger(__name__)


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class FeatureService:
    """Turns request frames into feature frames; never raises on bad input."""

    def __init__(self, weights: WeightStore, cache_bytes: int | None = 256 * 2**20):
        self.weights = weights
        self.cfg = weights.cfg
        self.cache = FeatureCache(cache_bytes)
        self._count_lock = threading.Lock()
        self.forwards = 0

    def cache_key(self, image: np.ndarray) -> str:
        h = hashlib.sha256(image.dtype.str.encode() + repr(image.shape).encode())
        h.update(image.tobytes())
        h.update(self.weights.fingerprint.encode())
        return h.hexdigest()

    def _forward(self, image: np.ndarray) -> FeatureSet:
        with self._count_lock:
            self.forwards += 1
        return extract_features(Tensor(image, dtype=self.weights.dtype), self.weights, self.cfg)

    def features(self, image: np.ndarray) -> FeatureSet:
        image = np.ascontiguousarray(image)
        return self.cache.get_or_compute(
            self.cache_key(image),
            lambda: self._forward(image),
            lambda fs: sum(z.data.nbytes for z in fs.features),
        )

    def _image(self, frame: FeatureFrame) -> np.ndarray:
        img = frame.payload
        want = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if img.shape != want:
            raise ValueError(f"image shape {img.shape} != {want}")
        if img.dtype == np.uint8:
            img = img.astype(np.float32) / np.float32(255.0)
        return img

    def handle_frame(self, frame: FeatureFrame) -> FeatureFrame:
        if frame.frame_type is not FrameType.REQUEST:
            return error_frame(ErrorCode.MALFORMED, f"expected a request frame, got {frame.frame_type.name}", frame.input_id)
        try:
            spec = spec_from_frame(frame)
            spec.validate(self.cfg.N)
        except (ContractError, ValueError) as exc:
            return error_frame(ErrorCode.BAD_SPEC, str(exc), frame.input_id)
        try:
            image = self._image(frame)
        except ValueError as exc:
            return error_frame(ErrorCode.BAD_IMAGE, str(exc), frame.input_id)
        try:
            out = apply(spec, self.features(image))
        except Exception as exc:  # the server must stay up
            log.exception("feature extraction failed")
            return error_frame(ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}", frame.input_id)
        return FeatureFrame(FrameType.FEATURE, frame.input_id, out.data, frame.mode, frame.k, frame.g)

    def handle(self, raw: bytes) -> bytes:
        try:
            frame = decode_frame(raw)
        except FrameError as exc:
            return encode_frame(error_frame(ErrorCode.MALFORMED, f"{type(exc).__name__}: {exc}"))
        return encode_frame(self.handle_frame(frame))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: FeatureService = self.server.service
        while True:
            try:
                frame, _ = read_frame(self.rfile)
            except EOFError:
                return
            except FrameError as exc:
                # stream position is unknown after a bad frame; reply and hang up
                self._send(error_frame(ErrorCode.MALFORMED, f"{type(exc).__name__}: {exc}"))
                return
            except OSError:
                return
            self._send(service.handle_frame(frame))

    def _send(self, frame: FeatureFrame) -> None:
        try:
            self.wfile.write(encode_frame(frame))
            self.wfile.flush()
        except OSError:
            pass


class FeatureServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, service: FeatureService, address: str = "127.0.0.1:0"):
        super().__init__(parse_address(address), _Handler)
        self.service = service

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "FeatureServer":
        threading.Thread(target=self.serve_forever, name="edgetune-server", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def serve(weights: WeightStore, address: str = "127.0.0.1:0", cache_bytes: int | None = 256 * 2**20) -> FeatureServer:
    """Start a feature server in a background thread and return it."""
    return FeatureServer(FeatureService(weights, cache_bytes), address).start()


def spec_from_frame(frame: FeatureFrame) -> GatherSpec:
    k = None if frame.k == K_ALL else frame.k
    return GatherSpec(GatherMode(frame.mode), k=k, g=max(frame.g, 1))
