"""Command line entry point.

Every option can also come from the environment as
``EDGETUNE_<COMMAND>_<OPTION>`` (e.g. ``EDGETUNE_TUNE_SEED=3``); flags win
over the environment, which wins over the defaults.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .backbone import CONFIGS, WeightStore, random_weights
from .gather import GatherMode, GatherSpec, bytes_per_image, megabytes
from .harness.experiments import (
    BASELINES,
    DESK_INIT_STD,
    SEEDS,
    Bench,
    window_grid,
    baseline_setup,
    desk_backbone,
    edge_config,
    select_k,
    select_lr,
    suite_means,
    baseline_grid,
)
from .harness.report import (
    COLUMNS,
    RUN_FILE,
    build_table,
    dry_transfer,
    load_runs,
    peak_rss_bytes,
    render_figures,
    to_csv,
    to_text,
)
from .harness.tasks import FAMILIES, make_task
from .harness.train import TrainConfig, TrainingDiverged, accuracy, train_edge
from .edge import EdgeNetwork
from .weights import WeightFormatError
from .tensor import ContractError, DimensionError
from .transport import FeatureService, FrameError, TransportError, LoopbackClient, SocketClient, overhead_report, serve as start_server

log = logging.getLogger("edgetune")


def _backbone(config: str, weights: str | None, seed: int) -> WeightStore:
    cfg = CONFIGS[config]
    if weights:
        return WeightStore.load(weights, cfg)
    if config == "desk":
        return desk_backbone(seed)
    return random_weights(cfg, seed=seed)


def _load_image(path: str) -> np.ndarray:
    """[C, H, W] float32 in [0, 1] from .npy or any Pillow-readable raster."""
    if path.endswith(".npy"):
        return np.load(path).astype(np.float32)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _write_run(out: str | None, payload: dict, csv_text: str, csv_name: str) -> None:
    if not out:
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / csv_name).write_text(csv_text)
    (d / RUN_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class _Group(click.Group):
    """Turns expected failures into one-line errors with exit status 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (TransportError, ContractError, DimensionError, FrameError, WeightFormatError, TrainingDiverged, OSError) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc


config_option = click.option("--config", type=click.Choice(sorted(CONFIGS)), default="desk", show_default=True, help="Backbone configuration.")


@click.group(cls=_Group, context_settings={"auto_envvar_prefix": "EDGETUNE", "show_default": True})
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Edge tuning over a frozen ViT feature service."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), default=None, help="ETW1 weight file; seeded-random if omitted.")
@click.option("--bind", default="127.0.0.1:7070", help="host:port to listen on.")
@config_option
@click.option("--seed", default=0, help="Seed for random weights.")
@click.option("--cache-mb", default=256, help="Feature cache budget.")
def serve(weights, bind, config, seed, cache_mb):
    """Run the feature server until interrupted."""
    server = start_server(_backbone(config, weights, seed), bind, cache_mb * 2**20)
    click.echo(f"serving {config} features on {server.address}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice([m.value for m in GatherMode]), default="sum")
@click.option("--k", type=int, default=None, help="Layer cutoff for sum mode (default: all layers).")
@click.option("--g", type=int, default=1, help="Window for windowed mode.")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), default=None)
@config_option
@click.option("--seed", default=0)
@click.option("--server", default=None, help="host:port of a running server; in-process if omitted.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the gathered tensor as .npy.")
def extract(image_path, mode, k, g, weights, config, seed, server, out):
    """Gather features for one image and print a CSV summary."""
    image = _load_image(image_path)
    spec = GatherSpec(mode, k=k, g=g)
    client = SocketClient(server) if server else LoopbackClient(FeatureService(_backbone(config, weights, seed)))
    with client:
        tensor, rec = client.fetch_features(image, spec)
    if out:
        np.save(out, tensor.data)
    click.echo(to_csv([{"mode": mode, "k": "" if k is None else k, "shape": "x".join(map(str, tensor.shape)), "payload_bytes": rec.payload_bytes, "mb": f"{megabytes(rec.payload_bytes):.3f}"}]), nl=False)


@main.command()
@click.option("--task", type=click.Choice(FAMILIES), default="early-signal")
@click.option("--k", "k_opt", default="auto", help="Layer cutoff or 'auto' (validation over {N/2, 3N/4, N}).")
@click.option("--lr", "lr_opt", default="1e-3", help="Learning rate or 'auto' (grid 3e-3, 1e-3, 3e-4).")
@click.option("--seed", default=0)
@click.option("--method", type=click.Choice(BASELINES), default="miet")
@click.option("--epochs", default=20)
@click.option("--batch-size", default=32)
@click.option("--warmup-epochs", default=0)
@click.option("--L", "num_blocks", default=4, help="Edge blocks.")
@click.option("--r", "rank", default=32, help="Attention rank.")
@click.option("--block-fn", type=click.Choice(["low_rank_attention", "mlp", "dwconv"]), default="low_rank_attention")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--backbone-seed", default=0)
@click.option("--server", default=None, help="host:port of a running server; in-process if omitted.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory for metrics.csv and run.json.")
def tune(task, k_opt, lr_opt, seed, method, epochs, batch_size, warmup_epochs, num_blocks, rank, block_fn, weights, backbone_seed, server, out):
    """Train one edge network and print per-epoch metrics as CSV."""
    weights_store = _backbone("desk", weights, backbone_seed)
    service = FeatureService(weights_store)
    t = make_task(task, seed=seed, extractor=service.features)
    client = SocketClient(server) if server else LoopbackClient(service)
    cfg = weights_store.cfg
    bench = Bench(t, client, cfg.N, cfg.T, cfg.d)
    tcfg = TrainConfig(batch_size=batch_size, epochs=epochs, warmup_epochs=warmup_epochs, seed=seed)
    ecfg = edge_config(bench, L=num_blocks, r=rank, block_fn=block_fn)
    with client:
        if k_opt == "auto":
            k = select_k(bench, ecfg, replace(tcfg, lr=1e-3 if lr_opt == "auto" else float(lr_opt))).k if method in ("miet", "gather_probe") else cfg.N
        else:
            k = int(k_opt)
        spec, arch = baseline_setup(method, k, ecfg)
        lr = select_lr(bench, spec, arch, tcfg) if lr_opt == "auto" else float(lr_opt)
        tcfg = replace(tcfg, lr=lr)
        data = bench.data(spec)
        net = EdgeNetwork.init(arch, seed=seed, dtype=tcfg.dtype)
        result = train_edge(net, data, tcfg)
        test_acc = accuracy(net, *data.split("test"), tcfg.dtype)
    history = [{"epoch": m.epoch, "lr": f"{m.lr:.6g}", "train_loss": f"{m.train_loss:.6f}", "train_acc": f"{m.train_acc:.4f}", "val_acc": f"{m.val_acc:.4f}"} for m in result.history]
    text = to_csv(history)
    click.echo(text, nl=False)
    click.echo(f"# method={method} task={task} seed={seed} k={k} lr={lr:g} test_acc={test_acc:.4f}", err=True)
    payload = {
        "kind": "tune",
        "task": task,
        "num_classes": t.num_classes,
        "train_config": asdict(tcfg),
        "edge_config": asdict(arch),
        "history": history,
        "results": [{"method": method, "task": task, "seed": seed, "k": k, "lr": lr, "val_acc": f"{result.history[-1].val_acc:.4f}", "test_acc": f"{test_acc:.4f}"}],
        "peak_rss_bytes": peak_rss_bytes(),
    }
    _write_run(out, payload, text, "metrics.csv")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


@main.command()
@click.option("--grid", type=click.Choice(["table2", "appendixC"]), default="table2", help="table2: the four methods on every task family; appendixC: side network over window sizes.")
@click.option("--g", "g_list", default="1,2,4,13", help="Window sizes for appendixC, comma separated.")
@click.option("--seeds", default=",".join(map(str, SEEDS)), help="Comma separated seeds.")
@click.option("--task", "tasks", default=",".join(FAMILIES), help="Comma separated task families.")
@click.option("--epochs", default=20)
@click.option("--backbone-seed", default=0)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def ablate(grid, g_list, seeds, tasks, epochs, backbone_seed, out):
    """Run an ablation grid and print one CSV row per run."""
    service = FeatureService(desk_backbone(backbone_seed))
    tcfg = TrainConfig(epochs=epochs)
    families = [t for t in tasks.split(",") if t]
    seeds_ = _int_list(seeds)
    if grid == "table2":
        results = baseline_grid(seeds_, families, tcfg, service)
        rows = [r.row() for r in results]
        extra = {"suite_means": {str(s): v for s, v in suite_means(results).items()}}
    else:
        results = window_grid(_int_list(g_list), seeds_, families[0], tcfg, service)
        rows = [r.row() for r in results]
        extra = {}
    text = to_csv(rows)
    click.echo(text, nl=False)
    payload = {"kind": f"ablate-{grid}", "num_classes": 4, "results": rows, "peak_rss_bytes": peak_rss_bytes(), "backbone_init_std": DESK_INIT_STD, **extra}
    _write_run(out, payload, text, "ablation.csv")


@main.command()
@config_option
@click.option("--dtype", type=click.Choice(["f32", "f64"]), default="f32")
@click.option("--images", default=1, help="Frames to encode per mode.")
def overhead(config, dtype, images):
    """Per-image transfer bytes for every gather mode, measured on encoded frames."""
    cfg = CONFIGS[config]
    rows = []
    specs = [GatherSpec(GatherMode.SUM), GatherSpec(GatherMode.LAST_ONLY), GatherSpec(GatherMode.STACK), GatherSpec(GatherMode.WINDOWED, g=1), GatherSpec(GatherMode.HEAD)]
    for spec in specs:
        rep = overhead_report(dry_transfer(spec, cfg, dtype, images))[0]
        assert rep["bytes_per_image"] == bytes_per_image(spec, cfg, dtype)
        rows.append({"mode": rep["mode"], "bytes_per_image": int(rep["bytes_per_image"]), "mb_per_image": f"{rep['mb_per_image']:.3f}"})
    raw = cfg.channels * cfg.image_size**2
    for name, size in (("raw_image_u8", 1), ("raw_image_f32", 4)):
        rows.append({"mode": name, "bytes_per_image": raw * size, "mb_per_image": f"{megabytes(raw * size):.3f}"})
    click.echo(to_csv(rows), nl=False)


@main.command()
@click.option("--runs", "runs_dir", required=True, type=click.Path(exists=True))
@config_option
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Where report.csv and figures go (default: the runs dir).")
def report(runs_dir, config, out):
    """Cost and accuracy table over run artifacts, with figures."""
    runs = load_runs(runs_dir)
    if not runs:
        raise click.ClickException(f"no {RUN_FILE} under {runs_dir}")
    rows = build_table(runs, CONFIGS[config])
    out_dir = Path(out or (runs_dir if Path(runs_dir).is_dir() else Path(runs_dir).parent))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(to_csv(rows, COLUMNS))
    click.echo(to_text(rows, COLUMNS), nl=False)
    for path in render_figures(runs, rows, out_dir):
        click.echo(f"wrote {path}", err=True)


if __name__ == "__main__":
    main()
