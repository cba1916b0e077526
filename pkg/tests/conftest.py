import numpy as np
import pytest

from ecg_jepa.ecg import BASE_LEADS, EcgRecord


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_record8(rng, n=64, rate=250.0):
    return EcgRecord(BASE_LEADS, rate, rng.normal(size=(8, n)))


def pytest_terminal_summary(terminalreporter):
    from helpers import CRITERION_LINES

    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
