import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mapreg.grid import GridSpec

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_random(rng, dims, passes=2):
    """Cheap smooth random field: box-averaged noise."""
    x = rng.normal(size=dims)
    for _ in range(passes):
        for a in range(len(dims)):
            x = (np.roll(x, 1, a) + x + np.roll(x, -1, a)) / 3
    return x


@pytest.fixture
def grid3():
    return GridSpec.from_dims((9, 8, 7))


@pytest.fixture
def grid2():
    return GridSpec.from_dims((12, 9))


# --- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record ``(criterion, passed, detail)``; lines are printed in the terminal summary."""

    def record(criterion: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[crit]
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if passed else 'FAIL'}  {detail}")
