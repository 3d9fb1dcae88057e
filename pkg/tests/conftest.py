import numpy as np
import pytest

from varlab.reward import synth_rewards
from varlab.space import make_space

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def instance():
    """Random 3x8 instance (Dirichlet reference, N(0,1) rewards)."""
    space = make_space(3, 8, "random-dirichlet", seed=7)
    return space, synth_rewards(space, "iid-gaussian", sigma=1.0, seed=7)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
