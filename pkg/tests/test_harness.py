import numpy as np
import pytest

from edgetune.backbone import DESK, VIT_B16, count_macs_backbone
from edgetune.edge import EdgeNetConfig, EdgeNetwork, count_macs_edge, count_params, lae_forward
from edgetune.gather import GatherMode, GatherSpec, bytes_per_image, megabytes
from edgetune.harness.experiments import (
    BASELINES,
    Bench,
    baseline_setup,
    best_by_val,
    desk_backbone,
    k_candidates,
    run_side,
    select_k,
    select_lr,
)
from edgetune.harness.optim import Adam, cosine_lr
from edgetune.harness.report import build_table, dry_transfer, method_cost, to_csv, to_text
from edgetune.harness.tasks import FAMILIES, SPLITS, SyntheticTask, make_task
from edgetune.harness.train import FeatureData, TrainConfig, TrainingDiverged, fit, train_edge
from edgetune.tensor import Tensor, philox
from edgetune.transport import FeatureService, LoopbackClient, overhead_report


@pytest.fixture(scope="module")
def service():
    return FeatureService(desk_backbone())


class RecordingClient(LoopbackClient):
    def __init__(self, service):
        super().__init__(service)
        self.seen = set()

    def fetch_features(self, image, spec):
        self.seen.add(np.asarray(image).tobytes())
        return super().fetch_features(image, spec)


def small_task(name="early-signal", seed=0, service=None, **kw):
    kw = {"n_train": 64, "n_val": 32, "n_test": 32, **kw}
    return make_task(name, seed=seed, extractor=service.features if service else None, **kw)


# --- schedule and optimizer -------------------------------------------------------


def test_cosine_endpoints_and_monotone():
    lrs = [cosine_lr(s, 100, 1e-3) for s in range(101)]
    assert lrs[0] == 1e-3 and lrs[100] == 0.0
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert abs(cosine_lr(50, 100, 1e-3) - 5e-4) < 1e-15


def test_warmup_is_linear():
    assert [cosine_lr(s, 100, 1.0, warmup_steps=4) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert cosine_lr(4, 100, 1.0, warmup_steps=4) == 1.0


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), dtype="f64", requires_grad=True)
    g = Tensor(np.array([0.5, -4.0, 1e-3]), dtype="f64")
    Adam([p], lr=0.1, eps=1e-12).step({p: g})
    assert np.allclose(p.data, [0.9, -1.9, 2.9], rtol=0, atol=1e-9)


# --- training loop -----------------------------------------------------------------


def separable_data(n=200, d=8, T=3, seed=0):
    r = philox(seed)
    y = r.integers(0, 2, n)
    x = r.standard_normal((n, T, d))
    x[:, 0, 0] += np.where(y == 1, 3.0, -3.0)
    x[:, 0, 0] += np.sign(x[:, 0, 0]) * 0.5
    return FeatureData({"train": x.astype(np.float32), "val": x[:20].astype(np.float32)}, {"train": y, "val": y[:20]})


def test_zero_lr_keeps_weights():
    data = separable_data()
    net = EdgeNetwork.init(EdgeNetConfig(d=8, L=1, r=4, num_classes=2), seed=1)
    before = {k: p.data.tobytes() for k, p in net.params.items()}
    train_edge(net, data, TrainConfig(epochs=2, lr=0.0))
    assert all(p.data.tobytes() == before[k] for k, p in net.params.items())


def test_linear_head_fits_separable_data():
    data = separable_data()
    net = EdgeNetwork.init(EdgeNetConfig(d=8, L=0, r=4, num_classes=2), seed=0)
    res = train_edge(net, data, TrainConfig(epochs=50, lr=1e-2))
    assert res.history[-1].train_acc >= 0.99


def test_same_seed_same_trajectory():
    data = separable_data()
    runs = []
    for _ in range(2):
        net = EdgeNetwork.init(EdgeNetConfig(d=8, L=2, r=4, num_classes=2), seed=4)
        runs.append(train_edge(net, data, TrainConfig(epochs=3, seed=4)).losses)
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_divergence_is_reported():
    data = separable_data()
    bad = FeatureData({"train": np.full_like(data.x["train"], np.inf)}, {"train": data.y["train"]})
    net = EdgeNetwork.init(EdgeNetConfig(d=8, L=0, r=4, num_classes=2), seed=0)
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train_edge(net, bad, TrainConfig(epochs=1))


def test_history_records_every_epoch():
    net = EdgeNetwork.init(EdgeNetConfig(d=8, L=0, r=4, num_classes=2), seed=0)
    res = train_edge(net, separable_data(), TrainConfig(epochs=4, warmup_epochs=1))
    assert [m.epoch for m in res.history] == [1, 2, 3, 4]
    assert res.history[0].lr == 1e-3
    assert res.history[-1].lr < 0.1 * res.history[0].lr
    assert all(0 <= m.val_acc <= 1 for m in res.history)


def test_fit_accepts_any_forward():
    data = separable_data()
    w = Tensor(np.zeros((8, 2)), dtype="f32", requires_grad=True)
    from edgetune.tensor import matmul, select

    res = fit(lambda x: matmul(select(x, 0, axis=1), w), [w], data, TrainConfig(epochs=30, lr=1e-2))
    assert res.history[-1].train_acc >= 0.99


# --- tasks --------------------------------------------------------------------------


@pytest.mark.parametrize("name", FAMILIES)
def test_tasks_are_deterministic_and_disjoint(name, service):
    a = small_task(name, seed=5, service=service)
    b = small_task(name, seed=5, service=service)
    seen = set()
    for s in SPLITS:
        assert a.images[s].tobytes() == b.images[s].tobytes()
        assert np.array_equal(a.labels[s], b.labels[s])
        rows = {img.tobytes() for img in a.images[s]}
        assert not rows & seen
        seen |= rows
    assert a.sizes() == {"train": 64, "val": 32, "test": 32}
    assert a.images["train"].shape[1:] == (3, 32, 32) and a.images["train"].dtype == np.float32
    assert set(np.unique(a.labels["train"])) <= set(range(a.num_classes))


def test_late_signal_needs_backbone():
    with pytest.raises(ValueError):
        make_task("late-signal", n_train=4, n_val=2, n_test=2)


def test_unknown_task():
    with pytest.raises(ValueError):
        make_task("nope")


def test_late_signal_classes_roughly_balanced(service):
    t = make_task("late-signal", seed=0, extractor=service.features)
    counts = np.bincount(np.concatenate([t.labels[s] for s in SPLITS]), minlength=4)
    assert counts.min() > 0.1 * counts.sum()


# --- selection -------------------------------------------------------------------------


def test_candidates():
    assert k_candidates(12) == [6, 9, 12]
    assert k_candidates(4) == [2, 3, 4]


def test_best_by_val_ties():
    assert best_by_val({6: 0.5, 9: 0.7, 12: 0.7}) == 12
    assert best_by_val({3e-3: 0.7, 1e-3: 0.7, 3e-4: 0.2}, prefer_larger=False) == 1e-3


def test_select_k_tie_goes_to_largest(service):
    base = small_task(seed=1)
    const = SyntheticTask("constant", 4, base.images, {s: np.zeros_like(v) for s, v in base.labels.items()}, 1)
    bench = Bench.loopback(const, service)
    cfg = EdgeNetConfig(d=64, L=1, r=8, num_classes=4)
    sel = select_k(bench, cfg, TrainConfig(epochs=5, lr=1e-2))
    assert sel.val_acc == {6: 1.0, 9: 1.0, 12: 1.0}
    assert sel.k == 12


def test_select_k_never_touches_test_split(service):
    task = small_task(seed=2)
    client = RecordingClient(service)
    bench = Bench(task, client, DESK.N, DESK.T, DESK.d)
    select_k(bench, EdgeNetConfig(d=64, L=1, r=8, num_classes=4), TrainConfig(epochs=1))
    select_lr(bench, GatherSpec(GatherMode.SUM, k=6), EdgeNetConfig(d=64, L=1, r=8, num_classes=4), TrainConfig(epochs=1))
    test_rows = {img.tobytes() for img in task.images["test"]}
    assert client.seen and not client.seen & test_rows


def test_select_k_needs_validation(service):
    task = small_task(seed=2, n_val=0)
    with pytest.raises(ValueError):
        select_k(Bench.loopback(task, service), EdgeNetConfig(d=64, L=1, r=8, num_classes=4), TrainConfig(epochs=1))


def test_baseline_setups():
    ecfg = EdgeNetConfig(d=64, L=4, r=32, num_classes=4)
    assert baseline_setup("linear_probe", 9, ecfg) == (GatherSpec(GatherMode.LAST_ONLY), EdgeNetConfig(d=64, L=0, r=32, num_classes=4))
    assert baseline_setup("gather_probe", 9, ecfg)[0] == GatherSpec(GatherMode.SUM, k=9)
    assert baseline_setup("lae_only", 9, ecfg) == (GatherSpec(GatherMode.LAST_ONLY), ecfg)
    assert baseline_setup("miet", 9, ecfg) == (GatherSpec(GatherMode.SUM, k=9), ecfg)
    with pytest.raises(ValueError):
        baseline_setup("bitfit", 9, ecfg)


def test_zero_block_lae_only_equals_linear_probe_before_training(service):
    task = small_task(seed=3)
    bench = Bench.loopback(task, service)
    ecfg = EdgeNetConfig(d=64, L=4, r=32, num_classes=4)
    spec_p, arch_p = baseline_setup("linear_probe", 12, ecfg)
    spec_l, arch_l = baseline_setup("lae_only", 12, ecfg)
    assert spec_p == spec_l
    lae = EdgeNetwork.init(arch_l, seed=0).zero_blocks()
    probe = EdgeNetwork(arch_p, {k: Tensor(v.data) for k, v in lae.params.items() if k.startswith("head.")})
    x = Tensor(bench.data(spec_p, ("val",)).x["val"])
    assert lae_forward(x, lae).data.tobytes() == lae_forward(x, probe).data.tobytes()


def test_side_run_smoke(service):
    bench = Bench.loopback(small_task(seed=4), service)
    res = run_side(bench, 2, TrainConfig(epochs=1))
    assert 0.0 <= res.test_acc <= 1.0
    assert res.transfer_bytes == bytes_per_image(GatherSpec(GatherMode.WINDOWED, g=2), DESK)


# --- report --------------------------------------------------------------------------


def fake_runs():
    rows = [{"method": m, "test_acc": f"{0.5 + 0.1 * i:.4f}"} for i, m in enumerate(BASELINES)]
    return [{"kind": "ablate-table2", "num_classes": 10, "results": rows, "peak_rss_bytes": 300 * 2**20, "_path": "x/run.json"}]


def test_report_vit_b16_reference_cells():
    table = {r["method"]: r for r in build_table(fake_runs(), VIT_B16)}
    assert table["miet"]["transfer_mb"] == 0.577
    assert table["linear_probe"]["transfer_mb"] == 0.577
    assert table["linear_probe"]["edge_macs"] == 768 * 10
    assert table["miet"]["cloud_macs"] == count_macs_backbone(VIT_B16)


def test_report_cells_come_from_counters():
    for row in build_table(fake_runs(), VIT_B16):
        spec, arch = baseline_setup(row["method"], VIT_B16.N, EdgeNetConfig(d=768, L=4, r=32, num_classes=10))
        assert row["params"] == count_params(arch)
        assert row["edge_macs"] == count_macs_edge(arch, VIT_B16.T)
        assert row["cloud_macs"] == count_macs_backbone(VIT_B16)
        assert row["transfer_mb"] == round(megabytes(bytes_per_image(spec, VIT_B16)), 3)
        assert row["peak_rss_mb"] == 300.0


def test_dry_transfer_matches_byte_model():
    for spec in (GatherSpec(GatherMode.SUM), GatherSpec(GatherMode.STACK), GatherSpec(GatherMode.HEAD)):
        rep = overhead_report(dry_transfer(spec, VIT_B16, images=3))[0]
        assert rep["images"] == 3 and rep["bytes_per_image"] == bytes_per_image(spec, VIT_B16)


def test_method_cost_head_only_for_probe():
    assert method_cost("linear_probe", DESK, 4).edge_macs == 64 * 4


def test_table_renderers():
    rows = build_table(fake_runs(), DESK)
    text, csv = to_text(rows), to_csv(rows)
    assert text.splitlines()[0].split()[0] == "method"
    assert csv.splitlines()[0].startswith("method,params")
    assert len(csv.splitlines()) == 1 + len(BASELINES)
