import numpy as np
import pytest

from ivdur import (
    Dataset,
    DgpConfig,
    SolverConfig,
    counterexample_fixture,
    dgp_analytic_fixture,
    dgp_generate,
    fit_survival_model,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240911)


@pytest.fixture(scope="session")
def counterexample():
    return counterexample_fixture()


@pytest.fixture(scope="session")
def dgp_exact():
    return dgp_analytic_fixture()


@pytest.fixture(scope="session")
def dgp_sample_10k():
    return dgp_generate(DgpConfig(n=10_000, seed=101))


@pytest.fixture(scope="session")
def dgp_model_10k(dgp_sample_10k):
    return fit_survival_model(dgp_sample_10k.dataset, tbar=10.0)


@pytest.fixture(scope="session")
def solver_config():
    return SolverConfig()


def small_dataset():
    """Hand-sized two-by-two dataset with a censored row."""
    y = [1.0, 2.0, 3.0, 4.0, 1.5, 2.5, 0.5, 3.5]
    z = [0, 0, 0, 0, 1, 1, 1, 1]
    w = [0, 0, 1, 1, 0, 0, 1, 1]
    delta = [1, 0, 1, 1, 1, 1, 0, 1]
    return Dataset(y, z, w, delta, ("a", "b"), ("u", "v"))


@pytest.fixture
def toy_data():
    return small_dataset()
