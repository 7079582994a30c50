import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from imdprompter import dataio, pipeline
from imdprompter.config import TrainConfig

torch.set_num_threads(1)

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def tiny_config(**kw) -> TrainConfig:
    """A small architecture that still exercises every component."""
    base = dict(
        image_size=32, batch_size=2, epochs=4, augment=False, feat_channels=8, branch_width=4,
        noiseprint_width=4, noiseprint_layers=2, cfp_proj_channels=4, encoder_channels=16,
        embed_dim=16, num_heads=2, lr=1e-3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def fixture_samples():
    return dataio.synthetic_fixture(n=8, size=64, seed=0)


@pytest.fixture(scope="session")
def small_samples():
    return dataio.synthetic_fixture(n=3, size=32, seed=1)


@pytest.fixture(scope="session")
def trained_tiny(small_samples):
    """A few training steps on a tiny model, shared by read-only tests."""
    cfg = tiny_config()
    state = pipeline.train(small_samples, cfg, steps=6)
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
