import numpy as np
import pytest

from qmmr import (
    FixtureShape, LayeredMDP, RewardNoise, generate_mdp, softmax_policy, uniform_policy,
)


def chain_mdp(horizon=2, reward=1.0, actions=1, noise="none"):
    """One state per level, deterministic transitions, constant reward."""
    A = actions
    trans = tuple(np.ones((1, A, 1)) for _ in range(horizon))
    rewards = (np.zeros((1, A)),) + tuple(np.full((1, A), reward) for _ in range(horizon))
    return LayeredMDP(trans, rewards, max(reward, 1.0), RewardNoise(noise))


def random_mdp(seed, horizon=3, states=4, actions=2, noise="gaussian"):
    shape = FixtureShape(horizon=horizon, states=states, actions=actions,
                         noise=RewardNoise(noise))
    mdp, _ = generate_mdp("random_tabular", shape, seed)
    return mdp


def linear_fixture(seed, horizon=3, states=4, actions=2, dim=3, kind="linear_complete",
                   temperature=0.5):
    shape = FixtureShape(horizon=horizon, states=states, actions=actions, dim=dim)
    pi = softmax_policy(shape.states_per_level, actions, temperature, seed + 1000)
    pi_b = uniform_policy(shape.states_per_level, actions)
    mdp, features = generate_mdp(kind, shape, seed, pi)
    return mdp, features, pi, pi_b


@pytest.fixture
def rng():
    return np.random.default_rng(20241017)
