import numpy as np
import pytest

from mrcflow.mesh import build_grid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit30():
    return build_grid(30, 30, 1 / 30, 1 / 30)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, in criterion order, at the end of the run."""
    import sys

    mod = next((m for m in list(sys.modules.values()) if hasattr(m, "ACCEPTANCE_RESULTS")), None)
    if mod is None or not mod.ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.ACCEPTANCE_RESULTS.values():
        terminalreporter.write_line(line)
