import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from freeep.io import synthetic_microarray
from freeep.model import GaussianLikelihood, GaussianPrior, GlmProblem, ProbitLikelihood, SpikeSlabPrior

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def ridge_mean(X, y, prior_var, noise_var):
    """Exact posterior mean of the all-Gaussian model."""
    K = X.shape[1]
    A = np.eye(K) / prior_var + X.T @ X / noise_var
    return np.linalg.solve(A, X.T @ y / noise_var)


@pytest.fixture
def gaussian_problem():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((12, 8)) / np.sqrt(8)
    y = rng.standard_normal(12)
    return GlmProblem(X, y, GaussianPrior(0.0, 2.0), GaussianLikelihood(0.5))


@pytest.fixture
def probit_problem():
    syn = synthetic_microarray(32, 64, rho=0.1, seed=7)
    return GlmProblem(syn.X, syn.y, SpikeSlabPrior(0.1, 1.0), ProbitLikelihood(1.0))


@pytest.fixture(scope="session")
def probit_512():
    syn = synthetic_microarray(256, 512, rho=0.1, seed=7)
    return GlmProblem(syn.X, syn.y, SpikeSlabPrior(0.1, 1.0), ProbitLikelihood(1.0))


# one line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
