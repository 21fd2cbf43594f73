import numpy as np
import pytest
from hypothesis import settings

from ulm3d.core import GridSpec, wavelength_mm

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

WAVELENGTH = wavelength_mm(1540.0, 6.25)


@pytest.fixture
def wl():
    return WAVELENGTH


@pytest.fixture
def half_grid():
    return GridSpec.for_fraction(2, WAVELENGTH, (16, 16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
