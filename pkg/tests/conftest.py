import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from posesmooth import nets, synth, training  # noqa: E402


@pytest.fixture(scope="session")
def small_scenario():
    """A dozen seeded trajectories with occlusions, shared by the fast tests."""
    return synth.generate_scenario(synth.ScenarioConfig(n_trajectories=12, seed=3))


@pytest.fixture(scope="session")
def small_windows(small_scenario):
    gt, noisy = small_scenario
    return training.to_windows(training.build_samples(gt, noisy))


@pytest.fixture
def tiny_cfg():
    return nets.NetConfig(state_width=3, conv_channels=(2, 3), kernel=3, head_width=2,
                          gain_hidden=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.LINES):
            terminalreporter.write_line(line)
