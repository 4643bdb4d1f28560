import numpy as np
import pytest

from viscoplastic.scenarios import force_driven, lid_driven
from viscoplastic.stokes import StokesKernel


class Setup:
    def __init__(self, scenario):
        self.scenario = scenario
        self.model = scenario.model
        self.coarse, self.fine = scenario.meshes()
        self.ops = scenario.operators(self.coarse, self.fine)
        self.kernel = StokesKernel(self.ops)
        self.load = scenario.load(self.fine)


@pytest.fixture(scope="session")
def small_force():
    return Setup(force_driven(n=8))


@pytest.fixture(scope="session")
def small_lid():
    return Setup(lid_driven(n=8, Bi=5.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
