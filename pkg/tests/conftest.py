import numpy as np
import pytest

from ctmcsens import load_model
from ctmcsens.model import MassAction, MichaelisMenten, network_from_reactions


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow; run with --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def birth_death():
    return load_model("birth_death")


@pytest.fixture(scope="session")
def switch():
    return load_model("switch")


@pytest.fixture(scope="session")
def mm_switch():
    return load_model("mm_switch")


@pytest.fixture(scope="session")
def dimerization():
    return load_model("dimerization")


@pytest.fixture(scope="session")
def toy_net():
    """Two species, a mass-action pair reaction and a saturating conversion."""
    return network_from_reactions(
        ["A", "B"],
        [
            ({}, {"A": 1}, MassAction(0), "make"),
            ({"A": 2}, {"B": 1}, MassAction(1), "pair"),
            ({"B": 1}, {}, MichaelisMenten(2, 3, 1), "clear"),
        ],
        4,
    )


def within(est, value, k=3.0):
    """True when every component of ``est`` is within ``k`` standard errors of ``value``."""
    return bool(np.all(np.abs(np.asarray(est.mean) - value) <= k * np.asarray(est.stderr) + 1e-12))
