import numpy as np
import pytest

from eebnn import arch, data, training


@pytest.fixture(scope="session")
def easy_dataset():
    return data.synth_dataset(4, 40, "easy", seed=5)


@pytest.fixture(scope="session")
def trained_model(easy_dataset):
    """Small quicknet trained enough to exit early on confident samples."""
    model = arch.build(arch.toy_spec("quicknet", n_classes=4), seed=3)
    cfg = training.TrainConfig(optimizer="adam", epochs=20, batch_size=16, seed=1, lr=0.003)
    training.train_loop(model, easy_dataset, cfg)
    return model


@pytest.fixture(scope="session")
def feature_bank(easy_dataset):
    return data.FeatureBank(easy_dataset, n_frames=98)


@pytest.fixture(scope="session")
def test_indices(easy_dataset):
    return [i for i, s in enumerate(easy_dataset.samples) if s.split == "test"]


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
