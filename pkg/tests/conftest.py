import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from robustcm.model import ModelSpec, ParameterSpace, Sample  # noqa: E402
from robustcm.montecarlo import DgpConfig, simulate_dgp  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def spec():
    return ModelSpec(k_x=1)


@pytest.fixture(scope="session")
def space():
    return ParameterSpace.star_default()


@pytest.fixture(scope="session")
def tiny_sample():
    """Fixed n = 12 dataset from the design with beta = 0.3."""
    return simulate_dgp(DgpConfig(n=12, beta_mode="strong", seed=20240601))


@pytest.fixture(scope="session")
def null_sample():
    return simulate_dgp(DgpConfig(n=100, beta_mode="strong", seed=7))


@pytest.fixture(scope="session")
def weak_sample():
    return simulate_dgp(DgpConfig(n=100, beta_mode="none", seed=8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_sample(rng, n):
    x = rng.standard_normal(n)
    y = 0.5 * x + 0.3 * x / (1 + np.exp(-10 * x)) + rng.standard_normal(n)
    return Sample(y, x)
