import numpy as np
import pytest

from underq.approx import MlpSpec
from underq.envs import PushEnv, generate_dataset
from underq.finite_mdp import FiniteMdp, random_mdp


@pytest.fixture(scope="session")
def small_mdp():
    return random_mdp(6, 3, seed=7, discount=0.9)


@pytest.fixture(scope="session")
def one_state_mdp():
    """Single absorbing state with one action and reward 1."""
    return FiniteMdp(
        transition=np.ones((1, 1, 1)),
        reward=np.array([[1.0]]),
        initial_dist=np.array([1.0]),
        discount=0.9,
    )


@pytest.fixture(scope="session")
def push_env():
    return PushEnv()


@pytest.fixture(scope="session")
def push_dataset(push_env):
    return generate_dataset(push_env, n_episodes=40, expert_fraction=0.5, seed=3)


@pytest.fixture
def tiny_spec():
    return MlpSpec(3, 2, hidden=(5, 4))
