"""Ladder side network used as a reference oracle.

Block ``S_i`` sees the previous side output plus backbone activation
``z_{i-1}``::

    o_i = F_i(o_{i-1} + z_{i-1}) + o_{i-1} + z_{i-1},   o_0 = 0

so the input to block ``i+1`` splits into terms produced by side blocks and
a running sum of backbone activations that no side weight touches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import FeatureSet
from .edge import EdgeNetConfig, block_param_shapes, head, low_rank_attention, pool
from .gather import gather_windowed
from .tensor import ContractError, Tensor, layernorm, no_tape, philox, reshape, select, trunc_normal


class SideNetwork:
    """N residual side blocks (norm + low-rank attention) and a linear head."""

    def __init__(self, N: int, d: int, r: int = 32, num_classes: int = 10, seed: int = 0, dtype="f32", std: float = 0.02):
        self.N = N
        self.cfg = EdgeNetConfig(d=d, L=N, r=r, num_classes=num_classes)
        rng = philox(seed)
        self.params: dict[str, Tensor] = {}
        for i in range(1, N + 1):
            for name, shape in block_param_shapes(self.cfg).items():
                leaf = name.rsplit(".", 1)[-1]
                if leaf == "gamma":
                    arr = np.ones(shape)
                elif leaf.startswith("b"):
                    arr = np.zeros(shape)
                else:
                    arr = trunc_normal(rng, shape, std=std, dtype="f64")
                self.params[f"blocks.{i}.{name}"] = Tensor(arr, dtype=dtype, requires_grad=True, name=name)
        self.params["head.weight"] = Tensor(trunc_normal(rng, (d, num_classes), dtype="f64"), dtype=dtype, requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(num_classes), dtype=dtype, requires_grad=True)

    @classmethod
    def random_biases(cls, N: int, d: int, r: int = 4, seed: int = 0, dtype="f64", std: float = 0.5) -> "SideNetwork":
        """Side network whose biases are random too (no zero-init shortcuts)."""
        net = cls(N, d, r=r, seed=seed, dtype=dtype, std=std)
        rng = philox(seed ^ 0x5EED)
        for name, p in net.params.items():
            if name.startswith("blocks.") and name.rsplit(".", 1)[-1].startswith(("b", "gamma")):
                p.assign(p.data + rng.standard_normal(p.shape) * std)
        return net

    def zeroed(self) -> "SideNetwork":
        for name, p in self.params.items():
            if name.startswith("blocks."):
                p.assign(np.zeros(p.shape))
        return self

    def block(self, i: int) -> dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def F(self, i: int, x: Tensor) -> Tensor:
        p = self.block(i)
        return low_rank_attention(layernorm(x, p["norm.gamma"], p["norm.beta"]), p)


@dataclass
class SideTrace:
    side_inputs: list[Tensor]
    inputs: list[Tensor] = field(default_factory=list)  # inputs[i] is the input to block i+1
    outputs: list[Tensor] = field(default_factory=list)  # outputs[i] is o_i, outputs[0] = 0
    net: SideNetwork | None = None

    @property
    def N(self) -> int:
        return len(self.side_inputs) - 1


def _run(side_inputs: Sequence[Tensor], net: SideNetwork) -> SideTrace:
    if len(side_inputs) != net.N + 1:
        raise ContractError(f"{len(side_inputs)} side inputs for a network with {net.N} blocks")
    trace = SideTrace(list(side_inputs), net=net)
    o = Tensor(np.zeros(side_inputs[0].shape), dtype=side_inputs[0].dtype)
    trace.outputs.append(o)
    for i in range(1, net.N + 1):
        x = o + side_inputs[i - 1]
        trace.inputs.append(x)
        o = net.F(i, x) + x
        trace.outputs.append(o)
    trace.inputs.append(o + side_inputs[net.N])
    return trace


def ladder_forward(fs: FeatureSet | Sequence[Tensor], net: SideNetwork) -> tuple[Tensor, SideTrace]:
    """Run the side ladder; returns o_N and the full trace."""
    zs = list(fs.features if isinstance(fs, FeatureSet) else fs)
    trace = _run(zs, net)
    return trace.outputs[-1], trace


def windowed_run(fs: FeatureSet, net: SideNetwork, g: int) -> tuple[Tensor, SideTrace]:
    """Ladder run with z_i replaced by the windowed side inputs."""
    trace = _run(gather_windowed(fs, g), net)
    return trace.outputs[-1], trace


def decompose_input(trace: SideTrace, i: int) -> dict[str, Tensor]:
    """Split the recorded input of block i+1 into side-block and backbone parts."""
    if not 1 <= i <= trace.N:
        raise ContractError(f"i={i} outside 1..{trace.N}")
    with no_tape():
        ext = trace.side_inputs[0].data.copy()
        for z in trace.side_inputs[1 : i + 1]:
            ext += z.data
        side = trace.net.F(1, trace.side_inputs[0]).data.copy()
        for l in range(2, i + 1):
            side += trace.net.F(l, trace.inputs[l - 1]).data
    return {"side_terms": Tensor(side, dtype=side.dtype), "external_term": Tensor(ext, dtype=ext.dtype)}


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(expected))), 1e-300)
    return float(np.max(np.abs(actual - expected))) / scale


def side_logits(side_inputs: Sequence[Tensor], net: SideNetwork) -> Tensor:
    """Classifier on the class token of the last side-block input (batched inputs allowed)."""
    trace = _run(side_inputs, net)
    pooled = pool(trace.inputs[-1], "class_token")
    if pooled.ndim == 1:
        return select(head(reshape(pooled, (1, pooled.shape[0])), net), 0, axis=0)
    return head(pooled, net)
