import numpy as np
import pytest

from gtimm import FitConfig, fit_gtimm, simulate_gtimm


@pytest.fixture(scope="session")
def sim2000():
    return simulate_gtimm(2000, seed=0)


@pytest.fixture(scope="session")
def fitted_sim(sim2000):
    d, truth = sim2000
    model = fit_gtimm(d, FitConfig(max_leaves=4, seed=0, max_epochs=120))
    return d, truth, model


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
