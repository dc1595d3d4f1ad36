"""Cost and accuracy tables from run artifacts, plus figures.

Each cost cell is recomputed from the module counters (count_params,
count_macs_edge, count_macs_backbone, overhead_report) rather than copied
from the run file; only accuracies and peak memory come from the runs.
"""

from __future__ import annotations

import csv
import io
import json
import resource
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..backbone import ViTConfig, count_macs_backbone
from ..edge import EdgeNetConfig, count_macs_edge, count_params
from ..gather import GatherMode, GatherSpec, gathered_shape
from ..tensor import as_dtype
from ..transport import FeatureFrame, FrameType, TransferRecord, encode_frame, overhead_report
from ..transport.protocol import K_ALL
from .experiments import BASELINES, baseline_setup

RUN_FILE = "run.json"
COLUMNS = ("method", "params", "edge_macs", "cloud_macs", "transfer_mb", "accuracy", "runs", "peak_rss_mb")


def peak_rss_bytes() -> int:
    """Peak resident set size of this process."""
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(rss if sys.platform == "darwin" else rss * 1024)


def dry_transfer(spec: GatherSpec, cfg: ViTConfig, dtype="f32", images: int = 1) -> list[TransferRecord]:
    """Transfer records for feature frames of the right shape, without a backbone."""
    payload = np.zeros(gathered_shape(spec, cfg), dtype=as_dtype(dtype))
    k = K_ALL if spec.k is None else spec.k
    frame = FeatureFrame(FrameType.FEATURE, bytes(32), payload, spec.mode, k, spec.g if spec.mode is GatherMode.WINDOWED else 0)
    raw = encode_frame(frame)
    return [TransferRecord(spec.mode.value, 0, len(raw), frame.payload_bytes, 0.0) for _ in range(images)]


@dataclass
class MethodCost:
    method: str
    params: int
    edge_macs: int
    cloud_macs: int
    transfer_mb: float


def method_cost(method: str, cfg: ViTConfig, num_classes: int, L: int = 4, r: int = 32, dtype="f32") -> MethodCost:
    """Cost row of one method on backbone ``cfg``."""
    ecfg = EdgeNetConfig(d=cfg.d, L=L, r=r, num_classes=num_classes)
    spec, arch = baseline_setup(method, cfg.N, ecfg)
    mb = overhead_report(dry_transfer(spec, cfg, dtype))[0]["mb_per_image"]
    return MethodCost(method, count_params(arch), count_macs_edge(arch, cfg.T), count_macs_backbone(cfg), mb)


def load_runs(root: str | Path) -> list[dict]:
    root = Path(root)
    files = sorted(root.rglob(RUN_FILE)) if root.is_dir() else [root]
    runs = []
    for f in files:
        with open(f) as fh:
            run = json.load(fh)
        run["_path"] = str(f)
        runs.append(run)
    return runs


def _results(runs: Iterable[dict]) -> list[dict]:
    return [r for run in runs for r in run.get("results", [])]


def build_table(runs: Sequence[dict], cfg: ViTConfig, num_classes: int | None = None) -> list[dict]:
    """One row per method seen in the runs, in the canonical method order."""
    results = _results(runs)
    if num_classes is None:
        num_classes = max((int(run.get("num_classes", 0)) for run in runs), default=0) or 10
    seen = [m for m in BASELINES if any(r["method"] == m for r in results)]
    peak = max((int(run.get("peak_rss_bytes", 0)) for run in runs), default=0)
    rows = []
    for m in seen:
        accs = [float(r["test_acc"]) for r in results if r["method"] == m]
        arch = next((run["edge_config"] for run in runs if "edge_config" in run and any(r["method"] == m for r in run.get("results", []))), {})
        cost = method_cost(m, cfg, num_classes, L=arch.get("L", 4) or 4, r=arch.get("r", 32))
        rows.append(
            {
                "method": m,
                "params": cost.params,
                "edge_macs": cost.edge_macs,
                "cloud_macs": cost.cloud_macs,
                "transfer_mb": round(cost.transfer_mb, 3),
                "accuracy": round(float(np.mean(accs)), 4),
                "runs": len(accs),
                "peak_rss_mb": round(peak / 2**20, 1),
            }
        )
    return rows


def to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def to_text(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return "(no runs)\n"
    columns = list(columns or rows[0].keys())
    cells = [[str(c) for c in columns]] + [[_fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, int) and abs(v) >= 10**6:
        return f"{v / 1e9:.4f}G" if abs(v) >= 10**8 else f"{v / 1e6:.3f}M"
    return str(v)


def render_figures(runs: Sequence[dict], rows: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Accuracy/cost figure and, for tuning runs, loss curves.  Returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if rows:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        names = [r["method"] for r in rows]
        ax1.bar(names, [r["accuracy"] for r in rows], color="#4c72b0")
        ax1.set_ylabel("test accuracy")
        ax1.set_ylim(0, 1)
        ax1.tick_params(axis="x", rotation=20)
        ax2.scatter([r["transfer_mb"] for r in rows], [r["accuracy"] for r in rows])
        for r in rows:
            ax2.annotate(r["method"], (r["transfer_mb"], r["accuracy"]), fontsize=8)
        ax2.set_xlabel("transfer MB / image")
        ax2.set_ylabel("test accuracy")
        fig.tight_layout()
        path = out_dir / "accuracy.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    curves = [run for run in runs if run.get("history")]
    if curves:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for run in curves:
            hist = run["history"]
            ax.plot([h["epoch"] for h in hist], [float(h["train_loss"]) for h in hist], label=Path(run["_path"]).parent.name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "loss.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    side = [r for r in _results(runs) if "g" in r]
    if side:
        gs = sorted({int(r["g"]) for r in side})
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(gs, [np.mean([float(r["test_acc"]) for r in side if int(r["g"]) == g]) for g in gs], marker="o")
        ax.set_xlabel("window g")
        ax.set_ylabel("test accuracy")
        fig.tight_layout()
        path = out_dir / "window.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
