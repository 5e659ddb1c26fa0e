import numpy as np
import pytest

from pomdp_learn.core import PomdpModel


def tiny_model(**over):
    kw = dict(
        states=["s0", "s1"],
        actions=["stay", "go"],
        observations=["o0", "o1"],
        transition=[[[0.9, 0.1], [0.2, 0.8]], [[0.3, 0.7], [0.6, 0.4]]],
        observation_fn=[[0.85, 0.15], [0.25, 0.75]],
        reward=[[1.0, 0.0], [-0.5, 0.8]],
        r_max=1.0,
        initial_belief=[0.6, 0.4],
    )
    kw.update(over)
    return PomdpModel(**kw)


@pytest.fixture
def model2():
    return tiny_model()


def pytest_configure(config):
    np.set_printoptions(precision=6, suppress=True)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
