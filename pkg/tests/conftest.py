import numpy as np
import pytest

from mmstyle.scene_io import generate_synthetic_scene


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.fixture(scope="session")
def scene4():
    return generate_synthetic_scene(0, 4, 64)


@pytest.fixture(scope="session")
def scene6_48():
    return generate_synthetic_scene(0, 6, 48)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = []


@pytest.fixture(scope="session")
def criterion_report():
    """``report(n, ok, detail)`` prints and records one line per acceptance criterion."""
    def report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        CRITERIA.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
