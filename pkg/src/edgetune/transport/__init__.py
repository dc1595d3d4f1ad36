from .cache import CacheEntry, FeatureCache
from .client import (
    ClientDecodeError,
    ClientTimeout,
    FeatureClient,
    LoopbackClient,
    ServerError,
    SocketClient,
    TransferRecord,
    TransportError,
    overhead_report,
)
from .protocol import (
    BadMagic,
    ChecksumError,
    ErrorCode,
    FeatureFrame,
    FrameError,
    FrameType,
    MalformedFrame,
    Truncated,
    VersionMismatch,
    decode_frame,
    encode_frame,
    error_frame,
)
from .service import FeatureServer, FeatureService, serve

__all__ = [
    "BadMagic",
    "CacheEntry",
    "ChecksumError",
    "ClientDecodeError",
    "ClientTimeout",
    "ErrorCode",
    "FeatureCache",
    "FeatureClient",
    "FeatureFrame",
    "FeatureServer",
    "FeatureService",
    "FrameError",
    "FrameType",
    "LoopbackClient",
    "MalformedFrame",
    "ServerError",
    "SocketClient",
    "TransferRecord",
    "TransportError",
    "Truncated",
    "VersionMismatch",
    "decode_frame",
    "encode_frame",
    "error_frame",
    "overhead_report",
    "serve",
]
