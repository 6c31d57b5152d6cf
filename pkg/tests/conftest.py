import numpy as np
import pytest

from catanet.network import CATANet, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config that still exercises every mechanism."""
    base = dict(
        dim=16,
        n_groups=1,
        n_centers=4,
        subgroup_size=8,
        refine_steps=2,
        ema_decay=0.999,
        heads=2,
        lrsa_patch=4,
        lrsa_overlap=1,
        ffn_expand=1.5,
        scale=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return CATANet(tiny_config(), seed=7)
