import logging

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("noisyflow").setLevel(logging.WARNING)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "flows": {"n": 10},
    "autoencoder": {"epochs": 1, "H": 4, "V": 8, "batch_size": 32},
    "density": {"K": 2, "hidden": 16, "epochs": 2},
    "augment": {"eta": 1, "m": 4, "steps": 2, "gan_hidden": 8},
    "detector": {"epochs": 2},
    "bench": {"test_normal": 40, "test_malicious": 10, "test_subsets": 2},
}


@pytest.fixture
def tiny_config():
    """Every stage at toy scale; runs the whole chain in seconds."""
    from noisyflow.config import PipelineConfig
    return PipelineConfig().with_values(**TINY)
