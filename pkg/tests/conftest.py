import pytest

from sdelab.grid import RngStream, TimeGrid


@pytest.fixture
def rng():
    return RngStream(0)


@pytest.fixture
def grid4():
    return TimeGrid(4, 4, 1)


@pytest.fixture
def grid16():
    return TimeGrid(16, 16, 1)


def within(value, reference, se, k=3.0):
    return abs(value - reference) <= k * se + 1e-15


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, ok, summary = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title} ({summary})")
