import numpy as np
import pytest

from longreg.cohort import dataset_from_phantom
from longreg.phantom import PhantomConfig, gen_cohort


@pytest.fixture(scope="session")
def small_cfg():
    return PhantomConfig(dims=(16, 16, 16), n_train=4, n_val=1, n_holdout=2, seed=7,
                         magnitude=(1.0, 2.0), jitter=1.5, smoothness=4.0, landmarks=2, landmark_radius=1.5)


@pytest.fixture(scope="session")
def small_cohort(small_cfg):
    return gen_cohort(small_cfg)


@pytest.fixture(scope="session")
def small_ds(small_cohort):
    return dataset_from_phantom(small_cohort)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
