import numpy as np
import pytest

from ibkd.dataio import SyntheticSpec, gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(latent_dim=4, input_dim=12, teacher_dim=8, corpus_size=120, query_count=20,
                         noise_sigma=0.1, seed=3, sts_pairs=40, negatives_k=3)


@pytest.fixture(scope="session")
def small_task(small_spec):
    return gen_synthetic(small_spec)
