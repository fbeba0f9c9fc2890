"""Shared fixtures: tiny synthetic runs that finish in seconds."""

import numpy as np
import pytest

from cdl.config import TrainConfig
from cdl.datasets import load_dataset
from cdl.net.model import build_model
from cdl.train import init_quant_params


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        lam=0.02,
        gamma=0.02,
        mode="rcdl",
        bits=4,
        model="tiny",
        dataset="synthetic",
        synthetic_classes=3,
        synthetic_train=96,
        synthetic_test=48,
        synthetic_image_size=4,
        epochs=2,
        batch_size=32,
        lr_w=0.05,
        lr_q=0.01,
        lr_s=0.01,
        lr_alpha=0.01,
        lr_beta=0.01,
        probe_batch_size=32,
        seed=7,
    )


@pytest.fixture
def tiny_dataset(tiny_config):
    return load_dataset(tiny_config)


@pytest.fixture
def quantized_model(tiny_config, tiny_dataset, rng):
    """Tiny dense model with quantizer state initialized from one batch."""
    model = build_model("tiny", tiny_dataset.input_shape, tiny_dataset.classes, rng, bits=tiny_config.bits)
    init_quant_params(model, tiny_dataset.train_x[:tiny_config.batch_size], tiny_config.bits)
    return model
