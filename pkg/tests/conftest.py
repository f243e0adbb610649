import numpy as np
import pytest

from odtsmlm.domain import Ellipsoid, OpticalConstants, PhantomSpec, make_grid, rasterize, ri_to_potential
from odtsmlm.forward import ForwardModel


@pytest.fixture(scope="session")
def constants():
    return OpticalConstants()


@pytest.fixture(scope="session")
def small_grid():
    return make_grid((12, 12, 8), (0.1, 0.1, 0.1))


@pytest.fixture(scope="session")
def small_model(small_grid, constants):
    return ForwardModel.build(small_grid, constants, tol=1e-10)


@pytest.fixture(scope="session")
def small_potential(small_grid, constants):
    """A soft ellipsoidal bump, peak contrast 0.05 over water."""
    spec = PhantomSpec((Ellipsoid((0.6, 0.6, 0.4), (0.35, 0.3, 0.25), 0.05),))
    return ri_to_potential(rasterize(small_grid, spec.solids, constants), constants, small_grid).values


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
