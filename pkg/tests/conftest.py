import numpy as np
import pytest

from potlearn.games import CongestionSpec, CournotSpec, congestion_form, cournot_form, generate_dataset
from potlearn.model import AffineGameForm, AffineMap, Box

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def scalar_form(lower=-np.inf, with_bound=False):
    """One agent, one variable: potential 0.5 x^2 - theta x, optionally with x >= 0."""
    A = np.array([[-1.0]]) if with_bound else np.zeros((0, 1))
    b = np.zeros(A.shape[0])
    return AffineGameForm(
        n=1, m=1, p=1,
        R0=AffineMap(np.eye(1)), Ri=AffineMap(np.zeros((1, 1, 1))),
        c0=AffineMap(np.zeros(1)), C=AffineMap(np.array([[-1.0]])),
        A=AffineMap(A), b=AffineMap(b), box=Box(np.array([lower]), np.array([np.inf])), name="scalar",
    )


@pytest.fixture
def cournot2():
    return cournot_form(2)


@pytest.fixture(scope="session")
def cournot5_data():
    rng = np.random.default_rng(0)
    spec = CournotSpec.random(5, rng)
    form = cournot_form(5)
    return spec, form, generate_dataset(form, spec.theta_true, spec.sample_context, 30, 0.1, rng)


@pytest.fixture(scope="session")
def congestion_data():
    rng = np.random.default_rng(2)
    spec = CongestionSpec.random(8, 0.3, 3, 3, rng)
    form = congestion_form(spec)
    return spec, form, generate_dataset(form, spec.theta_true, spec.sample_context, 30, 0.1, rng)
