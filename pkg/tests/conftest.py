import numpy as np
import pytest

from embp.model import bpsk, qpsk


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["bpsk", "qpsk"])
def constellation(request):
    return {"bpsk": bpsk, "qpsk": qpsk}[request.param]()


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def emit(name, ok, detail, check=True):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}" if check else f"INFO {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        if check:
            assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
