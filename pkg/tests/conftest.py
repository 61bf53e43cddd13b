import math

import numpy as np
import pytest
from hypothesis import settings

from ergodic_control.grid import default_L_scheme, make_grid
from ergodic_control.model import DiffusionModel, auction_v1, diffusion_limit

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def jump_model():
    return auction_v1(0.25)


@pytest.fixture(scope="session")
def diff_model(jump_model):
    return diffusion_limit(jump_model)


@pytest.fixture(scope="session")
def small_grid(diff_model):
    # CFL-admissible for the auction drift at h = 0.04
    return make_grid(36, 0.04, -0.88, default_L_scheme(diff_model.sigma))


def toy_model(drift, sigma=0.5, reward=None):
    """Diffusion with a given drift callable and a default zero reward."""
    if reward is None:
        reward = lambda x, a: np.zeros(np.broadcast(np.asarray(x), np.asarray(a)).shape)
    return DiffusionModel(drift, sigma, reward, (0.0, 1.0))


def stationary(P):
    """Stationary distribution by a dense eigen-solve (left eigenvector for eigenvalue 1)."""
    vals, vecs = np.linalg.eig(np.asarray(P, dtype=float).T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, k])
    return pi / pi.sum()


SQRT_E = math.exp(0.125)


ACCEPTANCE = []


def report(label, ok, detail):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    line = f"{label} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
