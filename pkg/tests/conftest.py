import numpy as np
import pytest

from tracegrad.data import generate_dataset
from tracegrad.structures import DEFAULT_BASIS


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def basis():
    return DEFAULT_BASIS


@pytest.fixture(scope="session")
def small_records():
    return generate_dataset(12, (4, 9), 2, seed=3)


def unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# one PASS/FAIL line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = {}


def record_acceptance(number, title, passed, detail):
    line = f"[{number:>2}] {'PASS' if passed else 'FAIL'} {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
