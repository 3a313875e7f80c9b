import numpy as np
import pytest

from omgd.objectives import DatasetSpec, LeastSquaresProblem, synth_regression


@pytest.fixture
def small_problem():
    return synth_regression(DatasetSpec(n=50, d=3, noise_sd=1.0, seed=7))


@pytest.fixture
def tiny_problem():
    rng = np.random.default_rng(3)
    return LeastSquaresProblem.from_samples(rng.standard_normal((6, 4)), rng.standard_normal(6))


@pytest.fixture(scope="session")
def appendix_problem():
    return synth_regression(DatasetSpec(n=1000, d=10, noise_sd=1.0, seed=0))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
