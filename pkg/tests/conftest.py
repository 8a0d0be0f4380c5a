import mpmath
import numpy as np
import pytest
from hypothesis import settings

from onlinecal.data import Trajectory

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

mpmath.mp.dps = 50


def mp_sigmoid(z) -> float:
    """Logistic function at 50 significant digits."""
    return float(1 / (1 + mpmath.exp(-mpmath.mpf(z))))


def make_traj(emb, correct=None, answer_ids=None, tokens=None, id=0):
    return Trajectory(np.asarray(emb, dtype=np.float64), correct, answer_ids, tokens, id=id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, name, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
