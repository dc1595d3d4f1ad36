"""Seeded synthetic image classification tasks.

Three families stand in for the benchmark task groups:

* ``early-signal``: each class owns a fixed pixel-level texture template
  added at low amplitude onto strong random clutter.  The class is linear
  in the pixels, hence sits in the patch embedding ``z_0``; every later
  block mostly adds clutter-driven features on top of it.
* ``late-signal``: clutter images labelled by a fixed random readout of the
  backbone's last-layer class token, i.e. by a global statistic the
  backbone only forms at depth.  Needs the backbone (or its feature
  extractor) at generation time.
* ``texture-sign``: every patch holds the class template with a random
  sign.  Sign-invariant, so no linear readout of pooled features can
  separate the classes while an attention block can.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..tensor import philox

SPLITS = ("train", "val", "test")
FAMILIES = ("early-signal", "late-signal", "texture-sign")


@dataclass
class SyntheticTask:
    name: str
    num_classes: int
    images: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    seed: int
    params: dict = field(default_factory=dict)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.images[name], self.labels[name]

    def sizes(self) -> dict[str, int]:
        return {s: len(self.labels[s]) for s in SPLITS}


def clutter(rng: np.random.Generator, n: int, size: int, channels: int, strength: float = 1.0) -> np.ndarray:
    """Smooth random fields plus a few bright or dark blobs."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((n, channels, size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, (2, n, 1, 1, 1))
        phase = rng.uniform(0, 2 * np.pi, (n, channels, 1, 1))
        amp = rng.normal(0, 1, (n, channels, 1, 1))
        out += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    for _ in range(2):
        cy, cx = rng.uniform(0, 1, (2, n, 1, 1, 1))
        rad = rng.uniform(0.08, 0.2, (n, 1, 1, 1))
        amp = rng.normal(0, 2, (n, channels, 1, 1))
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
    return strength * out


def _early_signal(rng, n, num_classes, size, channels, strength=0.12, clutter_strength=1.0, noise=0.3, **_):
    templates = rng.choice([-1.0, 1.0], size=(num_classes, channels, size, size))
    labels = rng.integers(0, num_classes, n)
    images = clutter(rng, n, size, channels, clutter_strength)
    images += strength * templates[labels]
    images += noise * rng.standard_normal(images.shape)
    return images, labels


def _late_signal(rng, n, num_classes, size, channels, extractor=None, clutter_strength=1.0, noise=0.5, **_):
    if extractor is None:
        raise ValueError("late-signal labels come from the backbone; pass extractor=")
    images = clutter(rng, n, size, channels, clutter_strength) + noise * rng.standard_normal((n, channels, size, size))
    images = images.astype(np.float32)
    summary = np.stack([extractor(img)[-1].data[0] for img in images]).astype(np.float64)
    summary = (summary - summary.mean(axis=0)) / (summary.std(axis=0) + 1e-12)
    scores = summary @ rng.standard_normal((summary.shape[1], num_classes))
    scores -= np.median(scores, axis=0)
    return images, np.argmax(scores, axis=1)


def _texture_sign(rng, n, num_classes, size, channels, patch=8, strength=1.0, noise=2.5, **_):
    g = size // patch
    templates = rng.standard_normal((num_classes, channels, patch, patch))
    templates /= np.sqrt((templates**2).mean(axis=(1, 2, 3), keepdims=True))
    labels = rng.integers(0, num_classes, n)
    signs = rng.choice([-1.0, 1.0], size=(n, g, g))
    tiles = templates[labels][:, None, None] * signs[:, :, :, None, None, None]  # n, g, g, c, p, p
    images = strength * tiles.transpose(0, 3, 1, 4, 2, 5).reshape(n, channels, size, size)
    images += noise * rng.standard_normal(images.shape)
    return images, labels


_FAMILIES = {"early-signal": _early_signal, "late-signal": _late_signal, "texture-sign": _texture_sign}


def make_task(
    name: str,
    seed: int = 0,
    n_train: int = 800,
    n_val: int = 200,
    n_test: int = 200,
    image_size: int = 32,
    channels: int = 3,
    num_classes: int = 4,
    extractor: Callable | None = None,
    **params,
) -> SyntheticTask:
    """Generate a task; the three splits are disjoint draws from one stream.

    ``extractor`` maps an image to its FeatureSet and is only used by
    ``late-signal``.
    """
    if name not in _FAMILIES:
        raise ValueError(f"unknown task {name!r}; choose from {FAMILIES}")
    rng = philox(seed)
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    total = sum(sizes.values())
    images, labels = _FAMILIES[name](rng, total, num_classes, image_size, channels, extractor=extractor, **params)
    images = images.astype(np.float32)
    out_x, out_y = {}, {}
    start = 0
    for split in SPLITS:
        stop = start + sizes[split]
        out_x[split] = images[start:stop]
        out_y[split] = labels[start:stop].astype(np.int64)
        start = stop
    return SyntheticTask(name, num_classes, out_x, out_y, seed, dict(params))
