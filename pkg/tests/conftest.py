import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = []


@pytest.fixture
def report():
    """Record one acceptance line; printed in the terminal summary."""

    def record(n, passed, detail):
        _CRITERIA.append((n, f"CRITERION {n}: {'PASS' if passed else 'FAIL'}  {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda item: item[0]):
        terminalreporter.write_line(line)
