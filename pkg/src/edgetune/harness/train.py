"""Edge-side training loop (Adam, batch 32, cosine decay)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..edge import EdgeNetwork, lae_forward
from ..gather import GatherSpec
from ..tensor import NumericError, Tape, Tensor, backward, cross_entropy, no_tape, philox
from ..transport import FeatureClient
from .optim import Adam, cosine_lr
from .tasks import SPLITS, SyntheticTask

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 0
    seed: int = 0
    dtype: str = "f32"


@dataclass
class FeatureData:
    """Gathered features and labels per split, as the edge device holds them."""

    x: dict[str, np.ndarray]
    y: dict[str, np.ndarray]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.x[name], self.y[name]


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    params: list[Tensor]
    history: list[EpochMetrics] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [m.train_loss for m in self.history]


def gather_task(task: SyntheticTask, client: FeatureClient, spec: GatherSpec, splits: Sequence[str] = SPLITS) -> FeatureData:
    """Fetch the gathered features of every image in ``splits`` through ``client``."""
    xs, ys = {}, {}
    for split in splits:
        images, labels = task.split(split)
        feats = [client.fetch_features(img, spec)[0].data for img in images]
        xs[split] = np.stack(feats) if feats else np.zeros((0,))
        ys[split] = labels
    return FeatureData(xs, ys)


def predict(forward: Callable[[Tensor], Tensor], x: np.ndarray, dtype="f32", batch_size: int = 256) -> np.ndarray:
    preds = []
    with no_tape():
        for start in range(0, len(x), batch_size):
            logits = forward(Tensor(x[start : start + batch_size], dtype=dtype))
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(forward, x: np.ndarray, y: np.ndarray, dtype="f32") -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(forward, x, dtype) == y))


def fit(forward: Callable[[Tensor], Tensor], params: list[Tensor], data: FeatureData, cfg: TrainConfig) -> TrainResult:
    """Minimise cross-entropy of ``forward`` over the train split."""
    x, y = data.split("train")
    n = len(y)
    if n == 0:
        raise ValueError("empty training split")
    steps_per_epoch = -(-n // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = philox(cfg.seed + 0x0DA7A)
    result = TrainResult(params)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        lr = cfg.lr
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                with Tape() as tape:
                    logits = forward(Tensor(x[idx], dtype=cfg.dtype))
                    loss = cross_entropy(logits, y[idx])
            except NumericError as e:
                raise TrainingDiverged(f"{e} at epoch {epoch}, step {step}") from e
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {step} (lr={lr:g})")
            grads = backward(loss, tape, params)
            lr = cosine_lr(step, total, cfg.lr, cfg.warmup_epochs * steps_per_epoch)
            opt.step(grads, lr)
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == y[idx]))
            step += 1
        val_x, val_y = data.split("val") if "val" in data.x else (np.zeros(0), np.zeros(0))
        val_acc = accuracy(forward, val_x, val_y, cfg.dtype)
        result.history.append(EpochMetrics(epoch, lr, loss_sum / n, correct / n, val_acc))
        log.debug("epoch %d loss %.4f val %.3f", epoch, loss_sum / n, val_acc)
    return result


def train_edge(net: EdgeNetwork, data: FeatureData, cfg: TrainConfig) -> TrainResult:
    """Train every edge-network parameter in place."""
    return fit(lambda z: lae_forward(z, net), list(net.params.values()), data, cfg)
