import numpy as np
import pytest

from fedsim.data import build_federated_dataset, synth_blobs
from fedsim.model_zoo import MCLRModel


@pytest.fixture
def blobs():
    return synth_blobs(seed=0, num_classes=3, num_features=4, n_total=60, spread=0.5)


@pytest.fixture
def federation():
    samples = synth_blobs(seed=1, num_classes=5, num_features=4, n_total=1000, spread=0.5)

    return build_federated_dataset(samples, num_clients=10, labels_per_client=2, split_ratio=0.75, seed=1,
                                   num_classes=5)


@pytest.fixture
def mclr(federation):
    return MCLRModel(federation.num_classes, federation.num_features)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
