import numpy as np
import pytest

from pvlab.core import default_spec
from pvlab.optim import minimize
from pvlab.verify import VERIFY_OPTIONS

_ACCEPTANCE = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    _ACCEPTANCE.append((number, title, passed, detail))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running sweep")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(
            f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")


@pytest.fixture(scope="session")
def spec():
    return default_spec()


@pytest.fixture(scope="session")
def base(spec):
    return minimize(spec, None, VERIFY_OPTIONS)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
