import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def gaussian_peak():
    from corrsynth.dut import auger_spectrum
    return auger_spectrum(0.0, 1.0, 1.0, background=(0.5,))


@pytest.fixture
def flat_zero():
    from corrsynth.dut import Characteristic1D, polynomial
    return Characteristic1D(lambda E: 0 * np.asarray(E, dtype=float), polynomial([]), (-10.0, 10.0))


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Log one acceptance line and return the pass flag for asserting."""

    def _record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return _record


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte-Carlo runs")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
