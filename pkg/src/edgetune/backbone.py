"""Frozen vision transformer used as the cloud-side feature extractor.

The backbone returns every intermediate activation: ``z_0`` is the patch
embedding with class token and positional embeddings added, ``z_i`` the
output of block ``i`` before any final norm.  Nothing here records onto a
tape.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import weights as etw
from .tensor import (
    DimensionError,
    Tensor,
    as_dtype,
    concat,
    gelu,
    layernorm,
    matmul,
    no_tape,
    philox,
    reshape,
    select,
    softmax_lastdim,
    transpose,
    trunc_normal,
)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    d: int = 64
    N: int = 12
    heads: int = 4
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.N < 0:
            raise ValueError("N must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def T(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def hidden(self) -> int:
        return self.d * self.mlp_ratio

    def config_hash(self) -> str:
        text = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()


VIT_B16 = ViTConfig(image_size=224, patch_size=16, d=768, N=12, heads=12, mlp_ratio=4, channels=3)
DESK = ViTConfig()
CONFIGS = {"vit-b16": VIT_B16, "desk": DESK}


def expected_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d, cfg.hidden
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.T, d),
    }
    for i in range(1, cfg.N + 1):
        p = f"blocks.{i}."
        shapes |= {
            p + "norm1.gamma": (d,),
            p + "norm1.beta": (d,),
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d),
            p + "attn.proj.bias": (d,),
            p + "norm2.gamma": (d,),
            p + "norm2.beta": (d,),
            p + "mlp.fc1.weight": (d, h),
            p + "mlp.fc1.bias": (h,),
            p + "mlp.fc2.weight": (h, d),
            p + "mlp.fc2.bias": (d,),
        }
    shapes |= {"norm.gamma": (d,), "norm.beta": (d,)}
    return shapes


class WeightStore:
    """Read-only named tensors for one backbone configuration."""

    def __init__(self, cfg: ViTConfig, arrays: Mapping[str, np.ndarray]):
        want = expected_shapes(cfg)
        missing = sorted(set(want) - set(arrays))
        if missing:
            raise KeyError(f"weight store missing {missing[:3]}{'...' if len(missing) > 3 else ''}")
        dtypes = {np.asarray(arrays[k]).dtype for k in want}
        if len(dtypes) != 1:
            raise ValueError(f"mixed weight dtypes {dtypes}")
        tensors = {}
        for name, shape in want.items():
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {arr.shape}")
            tensors[name] = Tensor(arr, name=name)
        self.cfg = cfg
        self.tensors = MappingProxyType(tensors)
        self.dtype = next(iter(tensors.values())).dtype
        h = hashlib.sha256(cfg.config_hash().encode())
        h.update(etw.dumps({k: t.data for k, t in tensors.items()}))
        self.fingerprint = h.hexdigest()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def save(self, path: str | Path) -> None:
        etw.save(path, self.to_arrays())

    @classmethod
    def load(cls, path: str | Path, cfg: ViTConfig) -> "WeightStore":
        return cls(cfg, etw.load(path))


def random_weights(cfg: ViTConfig, seed: int = 0, dtype="f32", std: float = 0.02) -> WeightStore:
    """Seeded backbone weights: truncated normal matrices, zero biases, unit norms."""
    rng = philox(seed)
    arrays = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith("gamma"):
            arrays[name] = np.ones(shape, dtype=as_dtype(dtype))
        elif name.endswith(("beta", "bias")):
            arrays[name] = np.zeros(shape, dtype=as_dtype(dtype))
        else:
            arrays[name] = trunc_normal(rng, shape, std=std, dtype=dtype)
    return WeightStore(cfg, arrays)


@dataclass(frozen=True)
class FeatureSet:
    """Ordered activations z_0..z_N of one input."""

    features: tuple[Tensor, ...]
    config_hash: str
    input_id: str

    def __post_init__(self):
        shapes = {z.shape for z in self.features}
        if len(self.features) == 0 or len(shapes) != 1:
            raise DimensionError(f"feature set needs >= 1 equal-shaped entries, got {shapes}")

    @property
    def N(self) -> int:
        return len(self.features) - 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.features[0].shape

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Tensor:
        return self.features[i]

    @classmethod
    def from_arrays(cls, arrays, config_hash: str = "", input_id: str = "") -> "FeatureSet":
        return cls(tuple(a if isinstance(a, Tensor) else Tensor(a) for a in arrays), config_hash, input_id)


def image_id(x: Tensor) -> str:
    """Content hash of the raw image bytes."""
    return hashlib.sha256(x.data.tobytes()).hexdigest()


def patchify(x: Tensor, cfg: ViTConfig) -> Tensor:
    """[C, H, W] -> [num_patches, C*p*p], patches row-major, (C, p, p) inside."""
    c, p, g = cfg.channels, cfg.patch_size, cfg.grid
    v = reshape(x, (c, g, p, g, p))
    v = transpose(v, (1, 3, 0, 2, 4))
    return reshape(v, (g * g, c * p * p))


def embed(x: Tensor, w: WeightStore, cfg: ViTConfig) -> Tensor:
    if x.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image shape {x.shape} != {(cfg.channels, cfg.image_size, cfg.image_size)}"
        )
    with no_tape():
        tokens = matmul(patchify(x, cfg), w["patch_embed.weight"]) + w["patch_embed.bias"]
        cls = reshape(w["cls_token"], (1, cfg.d))
        return concat([cls, tokens], axis=0) + w["pos_embed"]


def attention(h: Tensor, w: WeightStore, prefix: str, cfg: ViTConfig) -> Tensor:
    t, d = h.shape
    nh, dh = cfg.heads, d // cfg.heads
    qkv = matmul(h, w[prefix + "qkv.weight"]) + w[prefix + "qkv.bias"]
    qkv = transpose(reshape(qkv, (t, 3, nh, dh)), (1, 2, 0, 3))
    q, k, v = (select(qkv, i, 0) for i in range(3))
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(dh))
    ctx = matmul(softmax_lastdim(scores), v)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (t, d))
    return matmul(ctx, w[prefix + "proj.weight"]) + w[prefix + "proj.bias"]


def block(h: Tensor, w: WeightStore, i: int, cfg: ViTConfig) -> Tensor:
    """Pre-norm transformer block ``i`` (1-based)."""
    p = f"blocks.{i}."
    with no_tape():
        a = layernorm(h, w[p + "norm1.gamma"], w[p + "norm1.beta"])
        h = h + attention(a, w, p + "attn.", cfg)
        m = layernorm(h, w[p + "norm2.gamma"], w[p + "norm2.beta"])
        m = gelu(matmul(m, w[p + "mlp.fc1.weight"]) + w[p + "mlp.fc1.bias"])
        return h + (matmul(m, w[p + "mlp.fc2.weight"]) + w[p + "mlp.fc2.bias"])


def extract_features(x: Tensor, w: WeightStore, cfg: ViTConfig | None = None) -> FeatureSet:
    cfg = cfg or w.cfg
    input_id = image_id(x)
    x = Tensor(x.data, dtype=w.dtype) if x.dtype != w.dtype else x
    zs = [embed(x, w, cfg)]
    for i in range(1, cfg.N + 1):
        zs.append(block(zs[-1], w, i, cfg))
    return FeatureSet(tuple(zs), w.fingerprint, input_id)


def count_macs_backbone(cfg: ViTConfig) -> int:
    """Matmul MACs of one forward pass (norms, softmax and GELU excluded)."""
    t, d, h = cfg.T, cfg.d, cfg.hidden
    patch = cfg.num_patches * cfg.patch_dim * d
    per_block = t * d * 3 * d + 2 * t * t * d + t * d * d + 2 * t * d * h
    return patch + cfg.N * per_block
