import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import follower_lab as fl


@pytest.fixture(scope="session")
def human_params():
    """Human-scale parameter ratios."""
    return fl.FollowerParams(m_f=1.0, b_f=20.0, k_f=270.0)


@pytest.fixture(scope="session")
def unit_params():
    return fl.FollowerParams(m_f=1.0, b_f=1.0, k_f=1.0)


@pytest.fixture(scope="session")
def short_noise_traj():
    """30 s single-axis band-limited noise input."""
    return fl.gen_filtered_noise(fl.NoiseTrajSpec(seed=11, duration=30.0))


@pytest.fixture(scope="session")
def rich_noise_traj():
    """60 s single-axis noise input with enough bandwidth to excite the
    follower poles, for identification tests."""
    return fl.gen_filtered_noise(
        fl.NoiseTrajSpec(seed=7, duration=60.0, cutoff=2.5, amp_range=(-0.4, 0.4))
    )


@pytest.fixture(scope="session")
def human_record(human_params, rich_noise_traj):
    model = fl.build_state_space(human_params)
    return fl.simulate(model, rich_noise_traj)


@pytest.fixture(scope="session")
def default_record(human_params):
    """Paper-default excitation: 0.63 Hz band noise, 240 s."""
    traj = fl.gen_filtered_noise(fl.default_noise_spec(seed=19))
    model = fl.build_state_space(human_params)
    return fl.simulate(model, traj)
