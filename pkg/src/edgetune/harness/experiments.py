"""k selection, learning-rate selection, baselines and the ablation grids."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..backbone import DESK, ViTConfig, WeightStore, random_weights
from ..edge import EdgeNetConfig, EdgeNetwork, count_macs_edge, count_params
from ..gather import GatherMode, GatherSpec, bytes_per_image
from ..side import SideNetwork, side_logits
from ..tensor import Tensor, select
from ..transport import FeatureClient, FeatureService, LoopbackClient
from .tasks import FAMILIES, SyntheticTask, make_task
from .train import FeatureData, TrainConfig, accuracy, fit, gather_task, train_edge

log = logging.getLogger(__name__)

# Random backbone blocks at 0.02 barely move the residual stream; 0.1 makes
# each z_i differ enough from z_0 for layer choice to matter.
DESK_INIT_STD = 0.1
LR_GRID = (3e-3, 1e-3, 3e-4)
BASELINES = ("linear_probe", "gather_probe", "lae_only", "miet")
SEEDS = (0, 1, 2)


def desk_backbone(seed: int = 0, cfg: ViTConfig = DESK) -> WeightStore:
    return random_weights(cfg, seed=seed, std=DESK_INIT_STD)


def k_candidates(N: int) -> list[int]:
    """{N/2, 3N/4, N}, floored, deduplicated, ascending."""
    return sorted({N // 2, (3 * N) // 4, N})


def best_by_val(scores: dict, prefer_larger: bool = True):
    """Key with the highest score; ties go to the larger key (or smaller if asked)."""
    top = max(scores.values())
    tied = [k for k, v in scores.items() if v == top]
    return max(tied) if prefer_larger else min(tied)


@dataclass
class Bench:
    """A task plus a feature client, with gathered splits cached per spec."""

    task: SyntheticTask
    client: FeatureClient
    N: int
    T: int
    d: int
    _data: dict = field(default_factory=dict, repr=False)

    @classmethod
    def loopback(cls, task: SyntheticTask, service: FeatureService) -> "Bench":
        cfg = service.cfg
        return cls(task, LoopbackClient(service), cfg.N, cfg.T, cfg.d)

    def data(self, spec: GatherSpec, splits: Sequence[str] = ("train", "val", "test")) -> FeatureData:
        have = self._data.setdefault(spec, FeatureData({}, {}))
        missing = [s for s in splits if s not in have.x]
        if missing:
            fresh = gather_task(self.task, self.client, spec, missing)
            have.x.update(fresh.x)
            have.y.update(fresh.y)
        return FeatureData({s: have.x[s] for s in splits}, {s: have.y[s] for s in splits})


def edge_config(bench: Bench, L: int = 4, r: int = 32, block_fn: str = "low_rank_attention") -> EdgeNetConfig:
    return EdgeNetConfig(d=bench.d, L=L, r=r, num_classes=bench.task.num_classes, block_fn=block_fn)


def _train_eval(bench: Bench, spec: GatherSpec, ecfg: EdgeNetConfig, tcfg: TrainConfig, splits) -> tuple[EdgeNetwork, dict]:
    data = bench.data(spec, splits)
    net = EdgeNetwork.init(ecfg, seed=tcfg.seed, dtype=tcfg.dtype)
    result = train_edge(net, data, tcfg)
    accs = {s: accuracy(net, *data.split(s), tcfg.dtype) for s in splits if s != "train"}
    accs["train"] = result.history[-1].train_acc
    return net, {"history": result.history, **accs}


@dataclass
class KSelection:
    k: int
    val_acc: dict[int, float]


def select_k(bench: Bench, ecfg: EdgeNetConfig, tcfg: TrainConfig, candidates: Sequence[int] | None = None) -> KSelection:
    """One edge net per candidate k (same seed); best validation accuracy wins.

    Only the train and val splits are ever gathered here.
    """
    candidates = k_candidates(bench.N) if candidates is None else list(candidates)
    if len(bench.task.labels["val"]) == 0:
        raise ValueError("select_k needs a non-empty validation split")
    scores = {}
    for k in candidates:
        _, m = _train_eval(bench, GatherSpec(GatherMode.SUM, k=k), ecfg, tcfg, ("train", "val"))
        scores[k] = m["val"]
        log.info("k=%d val=%.3f", k, scores[k])
    return KSelection(best_by_val(scores), scores)


def select_lr(bench: Bench, spec: GatherSpec, ecfg: EdgeNetConfig, tcfg: TrainConfig, grid: Sequence[float] = LR_GRID) -> float:
    """Learning rate with the best validation accuracy; ties go to the smaller rate."""
    scores = {}
    for lr in grid:
        _, m = _train_eval(bench, spec, ecfg, replace(tcfg, lr=lr), ("train", "val"))
        scores[lr] = m["val"]
    return best_by_val(scores, prefer_larger=False)


@dataclass
class BaselineResult:
    method: str
    task: str
    seed: int
    k: int
    val_acc: float
    test_acc: float
    train_acc: float
    params: int
    edge_macs: int
    transfer_bytes: int
    k_scores: dict[int, float] = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "method": self.method,
            "task": self.task,
            "seed": self.seed,
            "k": self.k,
            "val_acc": f"{self.val_acc:.4f}",
            "test_acc": f"{self.test_acc:.4f}",
            "params": self.params,
            "edge_macs": self.edge_macs,
            "transfer_bytes": self.transfer_bytes,
        }


def baseline_setup(name: str, k: int, ecfg: EdgeNetConfig) -> tuple[GatherSpec, EdgeNetConfig]:
    """Gather spec and edge architecture of a named method."""
    probe = replace(ecfg, L=0)
    if name == "linear_probe":
        return GatherSpec(GatherMode.LAST_ONLY), probe
    if name == "gather_probe":
        return GatherSpec(GatherMode.SUM, k=k), probe
    if name == "lae_only":
        return GatherSpec(GatherMode.LAST_ONLY), ecfg
    if name == "miet":
        return GatherSpec(GatherMode.SUM, k=k), ecfg
    raise ValueError(f"unknown baseline {name!r}; choose from {BASELINES}")


def run_baseline(
    name: str,
    bench: Bench,
    tcfg: TrainConfig,
    ecfg: EdgeNetConfig | None = None,
    k: int | None = None,
    cfg: ViTConfig = DESK,
) -> BaselineResult:
    """Train and score one method.  ``k=None`` on a summing method runs select_k."""
    ecfg = ecfg or edge_config(bench)
    scores: dict[int, float] = {}
    if name in ("gather_probe", "miet") and k is None:
        sel = select_k(bench, ecfg, tcfg)
        k, scores = sel.k, sel.val_acc
    k = bench.N if k is None else k
    spec, arch = baseline_setup(name, k, ecfg)
    _, m = _train_eval(bench, spec, arch, tcfg, ("train", "val", "test"))
    return BaselineResult(
        name,
        bench.task.name,
        tcfg.seed,
        k if spec.mode is GatherMode.SUM else bench.N,
        m["val"],
        m["test"],
        m["train"],
        count_params(arch),
        count_macs_edge(arch, bench.T),
        bytes_per_image(spec, cfg, tcfg.dtype),
        scores,
    )


def make_bench(family: str, seed: int, service: FeatureService, **task_kw) -> Bench:
    task = make_task(family, seed=seed, extractor=service.features, **task_kw)
    return Bench.loopback(task, service)


def baseline_grid(
    seeds: Sequence[int] = SEEDS,
    families: Sequence[str] = FAMILIES,
    tcfg: TrainConfig = TrainConfig(),
    service: FeatureService | None = None,
    methods: Sequence[str] = BASELINES,
    **task_kw,
) -> list[BaselineResult]:
    """Every method on every (seed, family).  miet picks k on validation; gather_probe reuses that k."""
    service = service or FeatureService(desk_backbone())
    out = []
    for seed in seeds:
        run_cfg = replace(tcfg, seed=seed)
        for fam in families:
            bench = make_bench(fam, seed, service, **task_kw)
            ordered = sorted(methods, key=lambda m: m != "miet")
            chosen = None
            for method in ordered:
                res = run_baseline(method, bench, run_cfg, k=chosen if method == "gather_probe" else None)
                if method == "miet":
                    chosen = res.k
                out.append(res)
                log.info("%s seed=%d %s test=%.3f", fam, seed, method, res.test_acc)
    return out


def suite_means(results: Sequence[BaselineResult]) -> dict[int, dict[str, float]]:
    """Mean test accuracy over families, per seed and method."""
    acc: dict[int, dict[str, list[float]]] = {}
    for r in results:
        acc.setdefault(r.seed, {}).setdefault(r.method, []).append(r.test_acc)
    return {s: {m: float(np.mean(v)) for m, v in per.items()} for s, per in acc.items()}


# --- windowed side tuning ---------------------------------------------------------


@dataclass
class SideResult:
    g: int
    seed: int
    val_acc: float
    test_acc: float
    transfer_bytes: int

    def row(self) -> dict:
        return {"g": self.g, "seed": self.seed, "val_acc": f"{self.val_acc:.4f}", "test_acc": f"{self.test_acc:.4f}", "transfer_bytes": self.transfer_bytes}


def side_forward(net: SideNetwork):
    def forward(x: Tensor) -> Tensor:
        return side_logits([select(x, i, axis=1) for i in range(net.N + 1)], net)

    return forward


def run_side(bench: Bench, g: int, tcfg: TrainConfig, r: int = 32, cfg: ViTConfig = DESK) -> SideResult:
    """Train a ladder side network on windowed side inputs of window ``g``."""
    spec = GatherSpec(GatherMode.WINDOWED, g=g)
    data = bench.data(spec)
    net = SideNetwork(bench.N, bench.d, r=r, num_classes=bench.task.num_classes, seed=tcfg.seed, dtype=tcfg.dtype)
    forward = side_forward(net)
    fit(forward, list(net.params.values()), data, tcfg)
    return SideResult(
        g,
        tcfg.seed,
        accuracy(forward, *data.split("val"), tcfg.dtype),
        accuracy(forward, *data.split("test"), tcfg.dtype),
        bytes_per_image(spec, cfg, tcfg.dtype),
    )


def window_grid(
    gs: Sequence[int],
    seeds: Sequence[int] = (0,),
    family: str = "early-signal",
    tcfg: TrainConfig = TrainConfig(),
    service: FeatureService | None = None,
    **task_kw,
) -> list[SideResult]:
    service = service or FeatureService(desk_backbone())
    out = []
    for seed in seeds:
        bench = make_bench(family, seed, service, **task_kw)
        for g in gs:
            out.append(run_side(bench, g, replace(tcfg, seed=seed)))
    return out
