import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long end-to-end studies")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end study, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def micro_store():
    from data_io import micro_bundle

    return micro_bundle().store


@pytest.fixture()
def micro_trainer(micro_store):
    from training import TrainConfig, Trainer

    return Trainer(micro_store, TrainConfig(embedding_dim=5, batch_size=2, epochs=3, seed=7))


@pytest.fixture()
def small_synthetic():
    from data_io import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(n_users=40, n_items=24, n_groups=6, min_group_size=2, max_group_size=4,
                         chain_length=3, chains_per_group=2, noise=0.0, seed=3)
    return generate_synthetic(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
