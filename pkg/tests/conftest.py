import numpy as np
import pytest

from equidist import _backend


@pytest.fixture(params=sorted(_backend.BACKENDS))
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    monkeypatch.setattr(_backend, "kernels", _backend.BACKENDS[request.param])
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, passed, detail, label=""):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[(number, label)] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
