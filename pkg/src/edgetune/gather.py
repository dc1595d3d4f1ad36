"""Gather functions: compress a FeatureSet into what crosses the wire."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .backbone import FeatureSet, ViTConfig
from .tensor import ContractError, Tensor, as_dtype, no_tape, select, stack

MB = 2**20


class GatherMode(str, Enum):
    SUM = "sum"
    STACK = "stack"
    WINDOWED = "windowed"
    LAST_ONLY = "last_only"
    # class-token vector of z_N: what a linear probe on the backbone head consumes
    HEAD = "head"


@dataclass(frozen=True)
class GatherSpec:
    mode: GatherMode = GatherMode.SUM
    k: int | None = None
    g: int = 1
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", GatherMode(self.mode))
        if self.k is not None and self.k < 0:
            raise ContractError(f"k must be >= 0, got {self.k}")
        if self.g < 1:
            raise ContractError(f"g must be >= 1, got {self.g}")

    def resolve_k(self, N: int) -> int:
        k = N if self.k is None else self.k
        if not 0 <= k <= N:
            raise ContractError(f"k={k} outside 0..{N}")
        return k

    def validate(self, N: int) -> None:
        if self.mode is GatherMode.SUM:
            self.resolve_k(N)
        elif self.mode is GatherMode.WINDOWED and not 1 <= self.g <= N + 1:
            raise ContractError(f"g={self.g} outside 1..{N + 1}")


def gather_sum(fs: FeatureSet, k: int, normalize: bool = False) -> Tensor:
    """z_0 + z_1 + ... + z_k, accumulated left to right."""
    if not 0 <= k <= fs.N:
        raise ContractError(f"k={k} outside 0..{fs.N}")
    acc = fs[0].data.copy()
    for z in fs.features[1 : k + 1]:
        acc += z.data
    if normalize:
        acc /= k + 1
    return Tensor(acc, dtype=acc.dtype)


def gather_stack(fs: FeatureSet) -> Tensor:
    with no_tape():
        return stack(fs.features, axis=0)


def gather_windowed(fs: FeatureSet, g: int) -> list[Tensor]:
    """Side inputs with a window: z_i for i < g, z_i - z_{i-g} otherwise."""
    if not 1 <= g <= fs.N + 1:
        raise ContractError(f"g={g} outside 1..{fs.N + 1}")
    out = []
    for i, z in enumerate(fs.features):
        out.append(z if i < g else Tensor(z.data - fs[i - g].data, dtype=z.dtype))
    return out


def gather_head(fs: FeatureSet) -> Tensor:
    with no_tape():
        return select(fs[fs.N], 0, axis=0)


def apply(spec: GatherSpec, fs: FeatureSet) -> Tensor:
    """Gathered tensor for ``spec`` (windowed mode stacks all side inputs)."""
    spec.validate(fs.N)
    mode = spec.mode
    if mode is GatherMode.SUM:
        return gather_sum(fs, spec.resolve_k(fs.N), spec.normalize)
    if mode is GatherMode.LAST_ONLY:
        return fs[fs.N]
    if mode is GatherMode.STACK:
        return gather_stack(fs)
    if mode is GatherMode.WINDOWED:
        with no_tape():
            return stack(gather_windowed(fs, spec.g), axis=0)
    return gather_head(fs)


def gathered_shape(spec: GatherSpec, cfg: ViTConfig) -> tuple[int, ...]:
    if spec.mode in (GatherMode.SUM, GatherMode.LAST_ONLY):
        return (cfg.T, cfg.d)
    if spec.mode in (GatherMode.STACK, GatherMode.WINDOWED):
        return (cfg.N + 1, cfg.T, cfg.d)
    return (cfg.d,)


def bytes_per_image(spec: GatherSpec, cfg: ViTConfig, dtype="f32") -> int:
    """Payload bytes for one image (frame headers excluded)."""
    return int(np.prod(gathered_shape(spec, cfg))) * as_dtype(dtype).itemsize


def megabytes(nbytes: float) -> float:
    return nbytes / MB
