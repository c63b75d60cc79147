import numpy as np
import pytest

from pbs_attn import _backend

_accept_lines = []


def pytest_terminal_summary(terminalreporter):
    if _accept_lines:
        terminalreporter.section("acceptance criteria")
        for line in _accept_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    """Record and print one PASS/FAIL line per acceptance criterion."""
    def record(num, ok, detail):
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _accept_lines.append(line)
        print(line)
        return ok
    return record


@pytest.fixture(params=sorted(_backend.available()))
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

