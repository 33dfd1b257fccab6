import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lossflow.triangle import Triangle

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def square(n=4, m=None, seed=0, tid="T", line="PP"):
    """Full-square triangle with smooth development and unit-ish premiums."""
    m = m or n
    r = np.random.default_rng(seed)
    first = 100.0 * np.exp(r.normal(0, 0.2, size=n))
    links = 1.0 + 0.8 * 0.5 ** np.arange(m - 1)
    losses = first[:, None] * np.concatenate([[1.0], np.cumprod(links)])[None, :]
    losses = losses * np.exp(r.normal(0, 0.01, size=(n, m)))
    losses = np.maximum.accumulate(losses, axis=1)
    return Triangle(tid, line, losses, np.full(n, 250.0))


@pytest.fixture
def small_square():
    return square(4)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
