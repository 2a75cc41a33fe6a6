import numpy as np
import pytest

from lpsactive.lps import Dataset, LpsModel, unit_box

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def lattice_1d(n):
    return (np.arange(n) + 0.5) / n


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def uniform_1d():
    """Noisy sine on a random 1-d design, n=400."""
    r = np.random.default_rng(7)
    x = r.random(400)
    y = np.sin(2 * np.pi * x) + 0.1 * r.standard_normal(400)
    return Dataset(x, y, unit_box(1))


@pytest.fixture
def lls():
    return LpsModel(Q=1)


@pytest.fixture
def lcs():
    return LpsModel(Q=3)
