"""Trainable edge network: stacked norm + low-rank attention blocks and a head.

Every block adds its output back onto its input, so with all block weights
at zero the network collapses to a linear head on the pooled input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import weights as etw
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    count_macs,
    depthwise_conv_tokens,
    dwconv_macs,
    gelu,
    layernorm,
    matmul,
    mean,
    philox,
    reshape,
    select,
    softmax_lastdim,
    transpose,
    trunc_normal,
)

BLOCK_FNS = ("low_rank_attention", "mlp", "dwconv")
DWCONV_KERNEL = 3


@dataclass(frozen=True)
class EdgeNetConfig:
    d: int = 64
    L: int = 4
    r: int = 32
    num_classes: int = 10
    block_fn: str = "low_rank_attention"
    head_pool: str | None = None  # class_token, or mean for dwconv

    def __post_init__(self):
        if self.head_pool is None:
            # dwconv never mixes patch tokens into the class token
            object.__setattr__(self, "head_pool", "mean" if self.block_fn == "dwconv" else "class_token")
        if self.block_fn not in BLOCK_FNS:
            raise ContractError(f"unknown block_fn {self.block_fn!r}")
        if self.head_pool not in ("class_token", "mean"):
            raise ContractError(f"unknown head_pool {self.head_pool!r}")
        if not 1 <= self.r <= self.d:
            raise ContractError(f"need 1 <= r <= d, got r={self.r}, d={self.d}")
        if self.L < 0 or self.num_classes < 1:
            raise ContractError("L must be >= 0 and num_classes >= 1")

    @property
    def mlp_hidden(self) -> int:
        # solves 2*d*h + h + d == 4*d*r + 2*r + d, which gives h = 2r exactly
        return round((4 * self.d * self.r + 2 * self.r) / (2 * self.d + 1))


def block_param_shapes(cfg: EdgeNetConfig) -> dict[str, tuple[int, ...]]:
    d, r = cfg.d, cfg.r
    shapes: dict[str, tuple[int, ...]] = {"norm.gamma": (d,), "norm.beta": (d,)}
    if cfg.block_fn == "low_rank_attention":
        shapes |= {
            "attn.wq": (d, r),
            "attn.bq": (r,),
            "attn.wk": (d, r),
            "attn.wv": (d, r),
            "attn.bv": (r,),
            "attn.wo": (r, d),
            "attn.bo": (d,),
        }
    elif cfg.block_fn == "mlp":
        h = cfg.mlp_hidden
        shapes |= {"mlp.w1": (d, h), "mlp.b1": (h,), "mlp.w2": (h, d), "mlp.b2": (d,)}
    else:
        shapes |= {"dwconv.weight": (DWCONV_KERNEL, DWCONV_KERNEL, d), "dwconv.bias": (d,)}
    return shapes


def param_shapes(cfg: EdgeNetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(1, cfg.L + 1):
        shapes |= {f"blocks.{i}.{k}": v for k, v in block_param_shapes(cfg).items()}
    shapes["head.weight"] = (cfg.d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


class EdgeNetwork:
    def __init__(self, cfg: EdgeNetConfig, params: dict[str, Tensor]):
        want = param_shapes(cfg)
        if set(params) != set(want):
            raise ContractError(f"parameter names differ: {sorted(set(params) ^ set(want))[:4]}")
        for name, shape in want.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
            params[name].requires_grad = True
            params[name].name = name
        self.cfg = cfg
        self.params = {name: params[name] for name in want}

    @classmethod
    def init(cls, cfg: EdgeNetConfig, seed: int = 0, dtype="f32") -> "EdgeNetwork":
        rng = philox(seed)
        params = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                arr = np.ones(shape)
            elif leaf.startswith("b"):
                arr = np.zeros(shape)
            else:
                arr = trunc_normal(rng, shape, std=0.02, dtype="f64")
            params[name] = Tensor(arr, dtype=dtype)
        return cls(cfg, params)

    def zero_blocks(self) -> "EdgeNetwork":
        """Copy with every block weight and bias at zero (head kept)."""
        params = {}
        for name, p in self.params.items():
            if name.startswith("blocks."):
                params[name] = Tensor(np.zeros(p.shape), dtype=p.dtype)
            else:
                params[name] = Tensor(p.data, dtype=p.dtype)
        return EdgeNetwork(self.cfg, params)

    def copy(self) -> "EdgeNetwork":
        return EdgeNetwork(self.cfg, {k: Tensor(p.data, dtype=p.dtype) for k, p in self.params.items()})

    def block(self, i: int) -> dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def __call__(self, z_mix: Tensor) -> Tensor:
        return lae_forward(z_mix, self)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def save(self, path: str | Path) -> None:
        etw.save(path, {k: p.data for k, p in self.params.items()})

    @classmethod
    def load(cls, path: str | Path, cfg: EdgeNetConfig) -> "EdgeNetwork":
        return cls(cfg, {k: Tensor(v) for k, v in etw.load(path).items()})


def low_rank_attention(z: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Single-head attention through an r-dimensional query/key/value space.

    The key projection carries no bias: a key bias shifts every score in a
    row by the same amount and cancels inside the softmax.
    """
    d, r = p["attn.wq"].shape
    if z.shape[-1] != d:
        raise DimensionError(f"attention input last dim {z.shape[-1]} != {d}")
    q = matmul(z, p["attn.wq"]) + p["attn.bq"]
    k = matmul(z, p["attn.wk"])
    v = matmul(z, p["attn.wv"]) + p["attn.bv"]
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(r))
    return matmul(matmul(softmax_lastdim(scores), v), p["attn.wo"]) + p["attn.bo"]


def mlp_block(z: Tensor, p: dict[str, Tensor]) -> Tensor:
    return matmul(gelu(matmul(z, p["mlp.w1"]) + p["mlp.b1"]), p["mlp.w2"]) + p["mlp.b2"]


def dwconv_block(z: Tensor, p: dict[str, Tensor]) -> Tensor:
    grid = math.isqrt(z.shape[-2] - 1)
    if grid * grid + 1 != z.shape[-2]:
        raise DimensionError(f"dwconv needs T = grid**2 + 1 tokens, got T={z.shape[-2]}")
    return depthwise_conv_tokens(z, p["dwconv.weight"], p["dwconv.bias"], grid)


_BLOCKS = {"low_rank_attention": low_rank_attention, "mlp": mlp_block, "dwconv": dwconv_block}


def lae_body(z_mix: Tensor, net: EdgeNetwork) -> Tensor:
    """h_L after all residual blocks; [.., T, d] in, same shape out."""
    if z_mix.shape[-1] != net.cfg.d or z_mix.ndim not in (2, 3):
        raise DimensionError(f"edge input {z_mix.shape} does not end in d={net.cfg.d}")
    fn = _BLOCKS[net.cfg.block_fn]
    h = z_mix
    for i in range(1, net.cfg.L + 1):
        p = net.block(i)
        h = h + fn(layernorm(h, p["norm.gamma"], p["norm.beta"]), p)
    return h


def pool(h: Tensor, how: str) -> Tensor:
    return select(h, 0, axis=-2) if how == "class_token" else mean(h, axis=-2)


def head(pooled: Tensor, net: EdgeNetwork) -> Tensor:
    return matmul(pooled, net.params["head.weight"]) + net.params["head.bias"]


def lae_forward(z_mix: Tensor, net: EdgeNetwork) -> Tensor:
    """Logits [num_classes] for one [T, d] input, or [B, num_classes] for a batch."""
    pooled = pool(lae_body(z_mix, net), net.cfg.head_pool)
    if pooled.ndim == 1:
        return select(head(reshape(pooled, (1, pooled.shape[0])), net), 0, axis=0)
    return head(pooled, net)


def count_params_split(cfg: EdgeNetConfig) -> tuple[int, int]:
    """(body, head) trainable parameter counts in closed form."""
    d, r = cfg.d, cfg.r
    if cfg.block_fn == "low_rank_attention":
        per_block = 3 * d * r + 2 * r + r * d + d
    elif cfg.block_fn == "mlp":
        h = cfg.mlp_hidden
        per_block = 2 * d * h + h + d
    else:
        per_block = DWCONV_KERNEL**2 * d + d
    body = cfg.L * (2 * d + per_block)
    return body, d * cfg.num_classes + cfg.num_classes


def count_params(cfg: EdgeNetConfig) -> int:
    body, head_n = count_params_split(cfg)
    return body + head_n


def count_macs_edge(cfg: EdgeNetConfig, T: int) -> int:
    """Matmul-like MACs of one per-image forward pass."""
    d, r = cfg.d, cfg.r
    if cfg.block_fn == "low_rank_attention":
        per_block = 3 * T * d * r + 2 * T * T * r + T * r * d
    elif cfg.block_fn == "mlp":
        per_block = 2 * T * d * cfg.mlp_hidden
    else:
        per_block = dwconv_macs(T, d, DWCONV_KERNEL)
    return cfg.L * per_block + d * cfg.num_classes


def instrumented_macs_edge(cfg: EdgeNetConfig, T: int, seed: int = 0) -> int:
    """MACs counted while actually running one forward pass."""
    net = EdgeNetwork.init(cfg, seed=seed, dtype="f64")
    x = Tensor(philox(seed + 1).standard_normal((T, cfg.d)), dtype="f64")
    with count_macs() as counter:
        lae_forward(x, net)
    return counter.macs


def with_classes(cfg: EdgeNetConfig, num_classes: int) -> EdgeNetConfig:
    return replace(cfg, num_classes=num_classes)
