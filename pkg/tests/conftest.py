from trustprobe.dataset import Dataset
from trustprobe.models import BaseModelSpec, Family
from trustprobe.noise import NoiseKind, NoiseSpec, apply_noise
from trustprobe.synthetic import make_blobs

import numpy as np
import pytest


@pytest.fixture
def blobs() -> Dataset:
    return make_blobs(150, 3, 4.0, seed=7)


@pytest.fixture
def noisy_blobs(blobs: Dataset) -> Dataset:
    noisy, _ = apply_noise(blobs, NoiseSpec(kind=NoiseKind.Ncar, seed=11, rate=0.2))
    return noisy


@pytest.fixture
def linear_klm() -> BaseModelSpec:
    # Blobs on a circle are linearly separable, so a short linear run is enough
    return BaseModelSpec(
        family=Family.Klm,
        seed=3,
        hyperparameters={'kernel': 'linear', 'learning_rate': 0.5, 'max_iter': 40}
    )


@pytest.fixture
def small_rbf_klm() -> BaseModelSpec:
    return BaseModelSpec(
        family=Family.Klm,
        seed=5,
        hyperparameters={'n_components': 20, 'max_iter': 15, 'learning_rate': 0.5}
    )


@pytest.fixture
def small_gbt() -> BaseModelSpec:
    return BaseModelSpec(family=Family.Gbt, seed=3, hyperparameters={'max_iter': 8, 'max_depth': 2})


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
