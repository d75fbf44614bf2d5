import numpy as np
import pytest
import torch

from imvc.datasets import SyntheticSpec, apply_mask, export_dataset, generate_mask, synthesize
from imvc.trainers import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full training runs on the synthetic fixture")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_mask(rng, n, v_count):
    """
    Random 0/1 mask in which every row keeps at least one view.
    """
    mask = rng.integers(0, 2, size=(n, v_count))
    for i in np.flatnonzero(mask.sum(axis=1) == 0):
        mask[i, rng.integers(v_count)] = 1
    return mask


@pytest.fixture
def tiny_config():
    return TrainConfig(
        k=3,
        latent_dim=4,
        encoder_hidden=[8],
        predictor_hidden=[8],
        energy_hidden=[8],
        pretrain_epochs=2,
        finetune_epochs=2,
        batch_size=16,
        lr=1e-3,
    ).validate()


@pytest.fixture
def tiny_dataset():
    spec = SyntheticSpec(n=40, v_count=2, k=3, latent_dim=3, view_dims=[6, 5], seed=0)
    return apply_mask(synthesize(spec), generate_mask(40, 2, 0.25, seed=0))


@pytest.fixture
def full_dataset():
    spec = SyntheticSpec(n=30, v_count=3, k=3, latent_dim=3, view_dims=[5, 4, 3], seed=1)
    return synthesize(spec)


@pytest.fixture
def tiny_sources(tmp_path, tiny_dataset):
    return export_dataset(tiny_dataset, tmp_path / "data")


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
