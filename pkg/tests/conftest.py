import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from c2crop import tensor as T
from c2crop.data import GeneratorConfig, SyntheticDataset, split_dataset
from c2crop.model import EncoderConfig

settings.register_profile(
    "det",
    derandomize=True,
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("det")


@pytest.fixture(autouse=True)
def finite_checks():
    """Assert per-op finiteness everywhere in the unit suite."""
    old = T.CHECK_FINITE
    T.CHECK_FINITE = True
    yield
    T.CHECK_FINITE = old


# A small but real model/dataset pairing used across test modules.
TINY_ENC = EncoderConfig(image_size=32, channels=8, feat_h=4, feat_w=4, heads=2)
TINY_GEN = GeneratorConfig(image_size=32, train_size=48, val_size=16)


@pytest.fixture(scope="session")
def tiny_enc():
    return TINY_ENC


@pytest.fixture(scope="session")
def tiny_gen():
    return TINY_GEN


@pytest.fixture(scope="session")
def tiny_datasets():
    train_idx, val_idx = split_dataset(TINY_GEN)
    return SyntheticDataset(TINY_GEN, train_idx), SyntheticDataset(TINY_GEN, val_idx)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
