import numpy as np
import pytest

from qpns.config import SolverConfig
from qpns.fourier import Lattice
from qpns.nssolver import build_reduced_form, problem_from_config, solve_euler
from qpns.toeplitz import TOp, decay_weight, xbracket

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k)):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def lat():
    return Lattice(1, 6, 4)


@pytest.fixture(scope="session")
def small_lat():
    return Lattice(1, 3, 3)


@pytest.fixture(scope="session")
def cfg():
    return SolverConfig()


@pytest.fixture(scope="session")
def lam(cfg):
    return cfg.lam


@pytest.fixture(scope="session")
def euler(cfg):
    prob = problem_from_config(cfg)
    return prob, solve_euler(prob).v


@pytest.fixture(scope="session")
def reduced(cfg, euler):
    return build_reduced_form(euler[1], cfg)


def random_top(lat, rng, decay=1.0, order=0.0, scale=1.0):
    """Toeplitz operator with entries damped like exp(-decay <l, j - j'>) <j'>^order."""
    shape = (4 * lat.L + 1,) * lat.d + (lat.n_x, lat.n_x)
    b = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    b *= scale * np.exp(-decay * (decay_weight(lat) - 1)) * xbracket(lat)[None, :] ** order
    return TOp(lat, b, order)


@pytest.fixture(scope="session")
def conjugated(cfg, euler):
    from qpns.straighten import conjugate_L1
    return conjugate_L1(euler[1], cfg.lam, cfg.eps, s0=cfg.s0)
