import csv
import io
import json

import numpy as np
import pytest
from click.testing import CliRunner

from edgetune.backbone import DESK
from edgetune.cli import main


def run(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env, catch_exceptions=False)


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_overhead_vit_b16():
    res = run("overhead", "--config", "vit-b16")
    assert res.exit_code == 0
    table = {r["mode"]: r for r in rows(res.stdout)}
    assert table["sum"]["bytes_per_image"] == "605184" and table["sum"]["mb_per_image"] == "0.577"
    assert table["stack"]["bytes_per_image"] == "7867392" and table["stack"]["mb_per_image"] == "7.503"
    assert table["head"]["mb_per_image"] == "0.003"
    assert table["raw_image_u8"]["bytes_per_image"] == str(3 * 224 * 224)


def test_overhead_f64_doubles():
    a = {r["mode"]: int(r["bytes_per_image"]) for r in rows(run("overhead").stdout)}
    b = {r["mode"]: int(r["bytes_per_image"]) for r in rows(run("overhead", "--dtype", "f64").stdout)}
    assert b["sum"] == 2 * a["sum"] and b["raw_image_u8"] == a["raw_image_u8"]


def test_extract_npy(tmp_path):
    img = np.random.default_rng(0).random((3, 32, 32), dtype=np.float32)
    np.save(tmp_path / "img.npy", img)
    res = run("extract", "--image", tmp_path / "img.npy", "--mode", "stack", "--out", tmp_path / "f.npy")
    assert res.exit_code == 0
    row = rows(res.stdout)[0]
    assert row["shape"] == f"{DESK.N + 1}x{DESK.T}x{DESK.d}"
    assert int(row["payload_bytes"]) == (DESK.N + 1) * DESK.T * DESK.d * 4
    assert np.load(tmp_path / "f.npy").shape == (DESK.N + 1, DESK.T, DESK.d)


def test_extract_png(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(tmp_path / "img.png")
    res = run("extract", "--image", tmp_path / "img.png", "--mode", "sum", "--k", 6)
    assert res.exit_code == 0 and rows(res.stdout)[0]["k"] == "6"


def test_extract_bad_k_is_clean_error(tmp_path):
    np.save(tmp_path / "img.npy", np.zeros((3, 32, 32), np.float32))
    res = CliRunner().invoke(main, ["extract", "--image", str(tmp_path / "img.npy"), "--k", "13"])
    assert res.exit_code == 1
    assert "Error" in res.output and "Traceback" not in res.output


def test_tune_is_reproducible(tmp_path):
    args = ("tune", "--task", "early-signal", "--k", 6, "--epochs", 2, "--seed", 1)
    a = run(*args, "--out", tmp_path / "a")
    b = run(*args)
    assert a.exit_code == 0 and b.exit_code == 0
    assert a.stdout == b.stdout
    assert len(rows(a.stdout)) == 2
    meta = json.loads((tmp_path / "a" / "run.json").read_text())
    assert meta["results"][0]["k"] == 6 and meta["train_config"]["seed"] == 1
    assert (tmp_path / "a" / "metrics.csv").read_text() == a.stdout


def test_env_fills_in_and_flags_win(tmp_path):
    base = ("tune", "--k", 6, "--method", "linear_probe")
    env = run(*base, env={"EDGETUNE_TUNE_EPOCHS": "1"})
    assert len(rows(env.stdout)) == 1
    flag = run(*base, "--epochs", 2, env={"EDGETUNE_TUNE_EPOCHS": "1"})
    assert len(rows(flag.stdout)) == 2


def test_report_over_runs(tmp_path):
    run("tune", "--k", 6, "--epochs", 1, "--method", "gather_probe", "--out", tmp_path / "runs" / "gp")
    res = run("report", "--runs", tmp_path / "runs")
    assert res.exit_code == 0
    assert res.stdout.splitlines()[0].split()[0] == "method"
    table = rows((tmp_path / "runs" / "report.csv").read_text())
    assert [r["method"] for r in table] == ["gather_probe"]
    assert table[0]["edge_macs"] == str(DESK.d * 4)
    assert (tmp_path / "runs" / "accuracy.png").stat().st_size > 0
    assert (tmp_path / "runs" / "loss.png").stat().st_size > 0


def test_report_without_runs(tmp_path):
    res = CliRunner().invoke(main, ["report", "--runs", str(tmp_path)])
    assert res.exit_code == 1 and "no run.json" in res.output


@pytest.mark.slow
def test_ablate_window_grid_small(tmp_path):
    res = run("ablate", "--grid", "appendixC", "--g", "1,13", "--seeds", "0", "--epochs", 1, "--out", tmp_path)
    assert res.exit_code == 0
    assert [r["g"] for r in rows(res.stdout)] == ["1", "13"]
    assert json.loads((tmp_path / "run.json").read_text())["kind"] == "ablate-appendixC"
