import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfclab.measures import SpaceTimeGrid, gaussian_density
from mfclab.mfg import SolverConfig, solve_mfc
from mfclab.model import BUILTINS, build_spec, default_grid

settings.register_profile("mfclab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mfclab")

UNIQUE_BUILTINS = ["quadratic-free", "drifted", "mean-penalty", "log-cosh"]


@pytest.fixture(scope="session")
def grid():
    return default_grid(1)


@pytest.fixture(scope="session")
def coarse_grid():
    return SpaceTimeGrid(1, 6.0, 49, 0.0, 1.0, 20)


@pytest.fixture(scope="session")
def m0(grid):
    return gaussian_density(grid, 0.0, 0.5)


@pytest.fixture(scope="session")
def specs(grid):
    return {name: build_spec(name, grid) for name in BUILTINS}


@pytest.fixture(scope="session")
def solved(specs, m0):
    """Minimizer sets of every builtin from the symmetric Gaussian, default solver settings."""
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = solve_mfc(specs[name], 0.0, m0, SolverConfig())
        return cache[name]

    return get


@pytest.fixture(scope="session")
def coarse_solved(coarse_grid):
    cache = {}

    def get(name, mean=0.0, variance=0.5):
        key = (name, mean, variance)
        if key not in cache:
            spec = build_spec(name, coarse_grid)
            m = gaussian_density(coarse_grid, mean, variance)
            cache[key] = (spec, solve_mfc(spec, 0.0, m, SolverConfig()))
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
