"""
Pytest configuration and shared fixtures.

Provides small hand-built networks, seeded synthetic feeders with their
sensitivities and peak-PV injections. Builders shared outside fixtures live
in ``factories``.
"""
import logging

import numpy as np
import pytest

from factories import make_chain, make_star, rated
from grid_model import build_sensitivities, generate_synthetic_feeder


@pytest.fixture
def chain3():
    return make_chain(3)


@pytest.fixture
def star3():
    return make_star(3)


@pytest.fixture(scope="session")
def feeder10():
    """Calibrated 10-bus (plus substation) overvoltage feeder."""
    return generate_synthetic_feeder(seed=7, n_buses=11, branching="chain-heavy")


@pytest.fixture(scope="session")
def sens10(feeder10):
    return build_sensitivities(feeder10)


@pytest.fixture(scope="session")
def feeder20():
    return generate_synthetic_feeder(seed=11, n_buses=21, branching="chain-heavy")


@pytest.fixture(scope="session")
def sens20(feeder20):
    return build_sensitivities(feeder20)


@pytest.fixture
def peak_injections(feeder10):
    """Full PV with light load: (p_demand, q_demand, p_generation)."""
    p_rated = rated(feeder10)
    p_demand = 0.1 * p_rated
    return p_demand, 0.3 * p_demand, p_rated


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    """Configure pytest with custom settings."""
    logging.getLogger("sqlalchemy.engine").setLevel(logging.WARNING)
