import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edgetune.backbone import ViTConfig, random_weights
from edgetune.tensor import philox

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ViTConfig(image_size=16, patch_size=8, d=16, N=3, heads=2, mlp_ratio=2, channels=3)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_weights():
    return random_weights(TINY, seed=3, dtype="f64", std=0.2)


@pytest.fixture
def rng():
    return philox(1234)


def random_image(cfg, seed=0, dtype=np.float64):
    return philox(seed).standard_normal((cfg.channels, cfg.image_size, cfg.image_size)).astype(dtype)
