import numpy as np
import pytest

from data import FeatureMatrix, SynthConfig, generate_synthetic
from models import TrainConfig

TINY_SIZES = dict(z_dim=4, interpreter_hidden=8, classifier_hidden=4, adversary_hidden=4,
                  discriminator_hidden=4, reconstructor_hidden=8)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=2, k_adversary=2, k_discriminator=2, k_adversary_consensus=2,
                       batch_size=8, probe_epochs=2, probe_hidden=(6, 4), **TINY_SIZES)


@pytest.fixture
def synth_small():
    matrix, _ = generate_synthetic(SynthConfig(n_samples=40, n_features=6, seed=1))
    return matrix


def make_matrix(features, ages, labels, speakers=None):
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    return FeatureMatrix(
        ids=[f"s{i}" for i in range(n)],
        speakers=speakers if speakers is not None else [f"p{i}" for i in range(n)],
        ages=ages,
        labels=labels,
        features=features,
        feature_names=[f"f{j}" for j in range(features.shape[1])],
    )


@pytest.fixture
def matrix_factory():
    return make_matrix
