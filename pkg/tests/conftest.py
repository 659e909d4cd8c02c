import numpy as np
import pytest
import torch

from facerecon.data import synthetic_faces
from facerecon.extractor import ExtractorConfig, train_stand_in_extractor

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_faces():
    return synthetic_faces(6, 4, 32, seed=1)


@pytest.fixture(scope="session")
def heldout_faces():
    return synthetic_faces(20, 6, 32, seed=200, subject_prefix="h")


@pytest.fixture(scope="session")
def quick_extractor():
    """Desk stand-in extractor trained briefly on 20 synthetic identities."""
    train = synthetic_faces(20, 8, 32, seed=5)
    return train_stand_in_extractor(train, ExtractorConfig(width=16, steps=300, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
