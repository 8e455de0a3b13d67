import numpy as np
import pytest

from segdesc.geometry import Segment


def random_segment(rng, n=50, sid=0, spread=1.0, observer=None, **kw):
    pts = rng.normal(scale=spread, size=(n, 3)) + rng.uniform(-20, 20, size=3)
    if observer is None:
        ang = rng.uniform(0, 2 * np.pi)
        observer = pts.mean(0) + np.array([8 * np.cos(ang), 8 * np.sin(ang), rng.uniform(-1, 3)])
    return Segment(sid, pts, observer, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
