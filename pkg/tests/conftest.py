import numpy as np
import pytest

from layoutattn.generator import GeneratorConfig
from layoutattn.optimizer import OptimizerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def small_gen():
    """A short, cheap generator loop for tests that only need the mechanics."""
    return GeneratorConfig(steps=6)


@pytest.fixture
def short_opt():
    return OptimizerConfig(iterations=8)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts, one line per criterion, after the run."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
