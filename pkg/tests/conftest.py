import numpy as np
import pytest

from depthforge.geometry import PointCloud


def sphere_points(n, radius=50.0, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return radius * d, d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def sphere_cloud():
    p, n = sphere_points(5000, rng=np.random.default_rng(7))
    return PointCloud(p, n)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record a criterion outcome: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
