"""Acceptance checks, one test and one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""

import os
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from edgetune.backbone import DESK, VIT_B16, FeatureSet, count_macs_backbone, extract_features
from edgetune.edge import BLOCK_FNS, EdgeNetConfig, EdgeNetwork, count_macs_edge, instrumented_macs_edge, lae_forward
from edgetune.gather import GatherMode, GatherSpec, bytes_per_image, gather_sum, gather_windowed, megabytes
from edgetune.harness.experiments import SEEDS, desk_backbone, suite_means, baseline_grid
from edgetune.harness.tasks import FAMILIES, make_task
from edgetune.harness.train import TrainConfig, gather_task, train_edge
from edgetune.side import SideNetwork, decompose_input, ladder_forward, relative_error, windowed_run
from edgetune.tensor import Tensor, count_macs, cross_entropy, finite_diff_check, philox
from edgetune.transport import (
    FeatureService,
    FrameError,
    LoopbackClient,
    SocketClient,
    decode_frame,
    encode_frame,
    serve,
)
from test_transport import random_frame


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def random_fs(N, T=5, d=8, seed=0):
    r = philox(seed)
    return FeatureSet.from_arrays([r.standard_normal((T, d)) for _ in range(N + 1)])


def desk_image(seed):
    return philox(seed).standard_normal((DESK.channels, DESK.image_size, DESK.image_size)).astype(np.float32)


def test_criterion_01_transfer_bytes(verdict):
    want = {GatherMode.SUM: 0.577, GatherMode.STACK: 7.503, GatherMode.HEAD: 0.003}
    got = {m: round(megabytes(bytes_per_image(GatherSpec(m), VIT_B16, "f32")), 3) for m in want}
    verdict(1, got == want, ", ".join(f"{m.value}={v:.3f} MB" for m, v in got.items()))


def test_criterion_02_mac_model(verdict):
    bb = count_macs_backbone(VIT_B16)
    edge = count_macs_edge(EdgeNetConfig(d=768, L=4, r=32, num_classes=10), VIT_B16.T)
    bb_err = abs(bb - 17.57e9) / 17.57e9
    edge_err = abs(edge - 0.09e9) / 0.09e9
    with count_macs() as c:
        extract_features(Tensor(desk_image(0)), desk_backbone())
    mismatches = [
        (fn, L)
        for fn in BLOCK_FNS
        for L in (0, 1, 4)
        if count_macs_edge(cfg := EdgeNetConfig(d=DESK.d, L=L, r=32, num_classes=4, block_fn=fn), DESK.T) != instrumented_macs_edge(cfg, DESK.T)
    ]
    ok = bb_err <= 0.02 and edge_err <= 0.10 and c.macs == count_macs_backbone(DESK) and not mismatches
    verdict(
        2,
        ok,
        f"backbone {bb / 1e9:.3f}G ({bb_err:.2%} off), edge {edge / 1e9:.4f}G ({edge_err:.2%} off), "
        f"desk backbone counted={c.macs} model={count_macs_backbone(DESK)}, edge mismatches={mismatches}",
    )


def test_criterion_03_side_input_identity(verdict):
    worst, checks, ext_same = 0.0, 0, True
    for N in range(1, 9):
        for seed in range(20):
            fs = random_fs(N, seed=1000 * N + seed)
            _, t1 = ladder_forward(fs, SideNetwork.random_biases(N, 8, seed=seed))
            _, t2 = ladder_forward(fs, SideNetwork.random_biases(N, 8, seed=seed + 500))
            for i in range(1, N + 1):
                parts = decompose_input(t1, i)
                recon = parts["side_terms"].data + parts["external_term"].data
                worst = max(worst, relative_error(recon, t1.inputs[i].data))
                ext_same &= parts["external_term"].data.tobytes() == decompose_input(t2, i)["external_term"].data.tobytes()
                checks += 1
    verdict(3, worst <= 1e-9 and ext_same, f"{checks} block inputs, worst rel err {worst:.2e}, external term bit-identical={ext_same}")


def test_criterion_04_window_limits(verdict):
    full_ok, worst = True, 0.0
    for N in range(1, 9):
        for seed in range(5):
            fs = random_fs(N, seed=seed)
            net = SideNetwork.random_biases(N, 8, seed=seed + 1)
            a, ta = ladder_forward(fs, net)
            b, tb = windowed_run(fs, net, N + 1)
            full_ok &= a.data.tobytes() == b.data.tobytes()
            full_ok &= all(x.data.tobytes() == y.data.tobytes() for x, y in zip(ta.inputs, tb.inputs))
            acc = np.zeros_like(fs[0].data)
            for i, zhat in enumerate(gather_windowed(fs, 1)):
                acc = acc + zhat.data
                worst = max(worst, relative_error(acc, fs[i].data))
    verdict(4, full_ok and worst <= 1e-12, f"g=N+1 bit-identical={full_ok}, g=1 telescoping worst rel err {worst:.2e}")


def test_criterion_05_edge_gradients(verdict):
    worst = {}
    for fn in BLOCK_FNS:
        cfg = EdgeNetConfig(d=6, L=2, r=3, num_classes=3, block_fn=fn)
        w = 0.0
        for batch in range(20):
            net = EdgeNetwork.init(cfg, seed=batch, dtype="f64")
            r = philox(1000 + batch)
            for p in net.params.values():
                p.assign(p.data + 0.3 * r.standard_normal(p.shape))
            z = Tensor(r.standard_normal((4, 5, 6)), dtype="f64")
            y = r.integers(0, 3, 4)
            w = max(w, finite_diff_check(lambda: cross_entropy(lae_forward(z, net), y), list(net.params.values()), step=5e-3, order=8))
        worst[fn] = w
    ok = all(v <= 1e-6 for v in worst.values())
    verdict(5, ok, "20 batches each, worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_criterion_06_degeneracies(verdict):
    lae_ok = True
    for fn in BLOCK_FNS:
        cfg = EdgeNetConfig(d=8, L=4, r=4, num_classes=3, block_fn=fn)
        net = EdgeNetwork.init(cfg, seed=2, dtype="f64").zero_blocks()
        head = {k: Tensor(v.data) for k, v in net.params.items() if k.startswith("head.")}
        probe = EdgeNetwork(EdgeNetConfig(d=8, L=0, r=4, num_classes=3, head_pool=cfg.head_pool), head)
        z = Tensor(philox(3).standard_normal((4, 5, 8)), dtype="f64")
        lae_ok &= lae_forward(z, net).data.tobytes() == lae_forward(z, probe).data.tobytes()
    side_ok = True
    for N in range(1, 9):
        fs = random_fs(N, seed=N)
        _, trace = ladder_forward(fs, SideNetwork.random_biases(N, 8, seed=N).zeroed())
        acc = np.zeros_like(fs[0].data)
        for i in range(N + 1):
            side_ok &= np.array_equal(trace.outputs[i].data, acc)
            acc = acc + fs[i].data
    prefix = 0.0
    for seed in range(20):
        fs = random_fs(12, seed=seed)
        for k in range(1, 13):
            diff = gather_sum(fs, k).data - gather_sum(fs, k - 1).data
            prefix = max(prefix, relative_error(diff, fs[k].data))
    verdict(6, lae_ok and side_ok and prefix <= 1e-12, f"zero LAE == probe: {lae_ok}, zero side o_i == sum z_l: {side_ok}, prefix worst {prefix:.1e}")


def test_criterion_07_transport(verdict):
    r = philox(7)
    round_trip = truncations = 0
    typed = True
    for n in range(10_000):
        f = random_frame(r)
        raw = encode_frame(f)
        round_trip += decode_frame(raw) == f and encode_frame(decode_frame(raw)) == raw
        if n % 100 == 0:
            for cut in range(len(raw)):
                try:
                    decode_frame(raw[:cut])
                    typed = False
                except FrameError:
                    truncations += 1
            flipped = bytearray(raw)
            flipped[int(r.integers(0, len(raw)))] ^= 1 << int(r.integers(0, 8))
            try:
                typed &= decode_frame(bytes(flipped)) != f
            except FrameError:
                pass

    weights = desk_backbone()
    svc = FeatureService(weights)
    server = serve(weights, "127.0.0.1:0")
    server.service = svc
    images = [desk_image(s) for s in range(10)]
    barrier = threading.Barrier(2)
    errors = []

    def client(order, spec):
        try:
            with SocketClient(server.address, timeout=30) as c:
                barrier.wait()
                for i in order:
                    c.fetch_features(images[i], spec)
        except Exception as exc:
            errors.append(exc)

    threads = [
        threading.Thread(target=client, args=(range(10), GatherSpec(GatherMode.SUM, k=6))),
        threading.Thread(target=client, args=(list(reversed(range(10))), GatherSpec(GatherMode.STACK))),
    ]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        concurrent_forwards = svc.forwards
        task = make_task("early-signal", seed=3, n_train=96, n_val=32, n_test=0)
        spec, cfg = GatherSpec(GatherMode.SUM, k=9), TrainConfig(epochs=3, seed=3)
        ecfg = EdgeNetConfig(d=DESK.d, L=2, r=16, num_classes=4)
        a = train_edge(EdgeNetwork.init(ecfg, seed=3), gather_task(task, LoopbackClient(FeatureService(weights)), spec), cfg)
        with SocketClient(server.address) as c:
            b = train_edge(EdgeNetwork.init(ecfg, seed=3), gather_task(task, c, spec), cfg)
    finally:
        server.stop()
    same = a.losses == b.losses
    ok = round_trip == 10_000 and typed and not errors and concurrent_forwards == 10 and same
    verdict(
        7,
        ok,
        f"round trips {round_trip}/10000, {truncations} truncations rejected, typed errors={typed}, "
        f"forwards for 10 images x 2 clients={concurrent_forwards}, loopback==socket losses={same}",
    )


@pytest.fixture(scope="module")
def baseline_results():
    start = time.perf_counter()
    results = baseline_grid(SEEDS, FAMILIES, TrainConfig(), FeatureService(desk_backbone()))
    return results, time.perf_counter() - start


def test_criterion_08_ablation_ordering(verdict, baseline_results):
    results, elapsed = baseline_results
    means = suite_means(results)
    lines, ok = [], True
    for seed, m in sorted(means.items()):
        lp, gp, lae, miet = (m[k] for k in ("linear_probe", "gather_probe", "lae_only", "miet"))
        good = lp <= gp <= lae <= miet and lp < miet and miet - lp >= 0.10
        ok &= good
        lines.append(f"seed {seed}: {lp:.3f}<={gp:.3f}<={lae:.3f}<={miet:.3f} gap {100 * (miet - lp):.1f}pt")
    ok &= elapsed < 600
    verdict(8, ok, "; ".join(lines) + f" ({elapsed:.0f}s)")


def test_criterion_09_k_direction(verdict, baseline_results):
    results, _ = baseline_results
    chosen = {(r.task, r.seed): r.k for r in results if r.method == "miet"}
    early = [chosen[("early-signal", s)] for s in SEEDS]
    late = [chosen[("late-signal", s)] for s in SEEDS]
    ok = sum(k < DESK.N for k in early) >= 2 and sum(k == DESK.N for k in late) >= 2
    verdict(9, ok, f"early-signal k={early}, late-signal k={late} (N={DESK.N})")


def test_criterion_10_cli_determinism(verdict, tmp_path):
    env = {k: v for k, v in os.environ.items() if not k.startswith("EDGETUNE_")}
    cmd = [sys.executable, "-m", "edgetune.cli", "tune", "--task", "early-signal", "--k", "9", "--lr", "1e-3", "--seed", "5", "--epochs", "5"]
    outs = [subprocess.run(cmd, capture_output=True, env=env, check=True, cwd=tmp_path).stdout for _ in range(2)]
    ok = outs[0] == outs[1] and outs[0].count(b"\n") == 6
    verdict(10, ok, f"two runs, {len(outs[0])} CSV bytes each, identical={outs[0] == outs[1]}")
