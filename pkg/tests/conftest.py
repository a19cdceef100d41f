import sys
from pathlib import Path

import numpy as np
import pytest

from protosearch.space import default_space, enumerate_space

HERE = Path(__file__).parent
STUB = HERE / "stubs" / "stub_trainer.py"
GOLDEN = HERE / "golden"


def stub_command(*args: str) -> list[str]:
    return [sys.executable, str(STUB), *args]


@pytest.fixture(scope="session")
def space():
    return default_space()


@pytest.fixture(scope="session")
def all_candidates(space):
    return enumerate_space(space)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# -- acceptance reporting -----------------------------------------------------------

_acceptance: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    prior = _acceptance.get(number, (title, True))[1]
    _acceptance[number] = (title, prior and report.passed if report.when == "call" else False)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok = _acceptance[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}")
