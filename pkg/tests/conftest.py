import numpy as np
import pytest

from prgrad import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    T.zero_grad()
    yield
    T.zero_grad()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_verdicts = []


@pytest.fixture
def verdict():
    """Record one acceptance line; fails the test when ``ok`` is false."""
    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _verdicts.append(line)
        print(line)
        assert ok, line
    return record


def skip_criterion(criterion, reason):
    line = f"SKIP criterion {criterion}: {reason}"
    _verdicts.append(line)
    pytest.skip(reason)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
