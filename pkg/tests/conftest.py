import math
import sys

import numpy as np
import pytest

from curvesig.geometry import PlanarCurve


def circle_points(n, r=1.0, phase=0.0):
    t = phase + 2 * math.pi * np.arange(n) / n
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def ellipse_points(n, alpha, beta):
    t = 2 * math.pi * np.arange(n) / n
    return np.column_stack([alpha * np.cos(t), beta * np.sin(t)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def circle():
    return PlanarCurve(circle_points(64))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
