"""
Toy offline-RL tasks with scripted experts.

Environments are batched: ``reset`` and ``step`` act on (n, state_dim)
arrays, so evaluation rolls out all episodes at once. Episodes end at the
horizon; ``done`` is only raised on true terminal states, so a time-limit
cut never masks bootstrapping.
"""

import abc
from collections import namedtuple
from functools import cached_property
from logging import getLogger
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .error import ParameterError
from .finite_mdp import FiniteMdp, OfflineDataset, TransitionRecord, random_mdp
from .helpers import spawn_seeds
from .operators import value_iteration

logger = getLogger(__name__)

REFERENCE_EPISODES = 200
REFERENCE_SEED = 20_231

# (states, rng) -> actions, all batched
PolicyFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]

ReferenceScores = namedtuple("ReferenceScores", "random,expert")
StepResult = namedtuple("StepResult", "next_states,rewards,dones")


class ToyEnv(abc.ABC):
    """A batched episodic task with actions in [-1, 1]^action_dim."""

    name: str = ""
    state_dim: int = 1
    action_dim: int = 1
    horizon: int = 20

    @abc.abstractmethod
    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ...

    @abc.abstractmethod
    def step(self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> StepResult:
        ...

    @abc.abstractmethod
    def expert_action(self, states: np.ndarray) -> np.ndarray:
        ...

    def random_action(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(states.shape[0], self.action_dim))

    def expert_policy(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.expert_action(states)

    def rollout_returns(
        self,
        policy: PolicyFn,
        n_episodes: int,
        seed: int,
        discount: float = 1.0,
        start_states: Optional[np.ndarray] = None,
        first_actions: Optional[np.ndarray] = None,
        horizon: Optional[int] = None,
    ) -> np.ndarray:
        """Per-episode (discounted) returns of ``policy``.

        ``start_states``/``first_actions`` pin the first state and action of
        each episode (Monte-Carlo Q estimates).
        """
        if n_episodes < 1:
            raise ParameterError(f"n_episodes must be >= 1, got {n_episodes!r}")
        rng = np.random.default_rng(seed)
        states = self.reset(rng, n_episodes) if start_states is None else np.array(start_states, dtype=float)
        if states.shape != (n_episodes, self.state_dim):
            raise ParameterError(f"start_states must have shape {(n_episodes, self.state_dim)}")
        returns = np.zeros(n_episodes)
        alive = np.ones(n_episodes, dtype=bool)
        for t in range(horizon or self.horizon):
            if t == 0 and first_actions is not None:
                actions = np.asarray(first_actions, dtype=float).reshape(n_episodes, self.action_dim)
            else:
                actions = np.clip(policy(states, rng), -1.0, 1.0)
            result = self.step(states, actions, rng)
            returns += alive * discount ** t * result.rewards
            alive &= ~result.dones
            states = result.next_states
            if not alive.any():
                break
        return returns

    @cached_property
    def reference_scores(self) -> ReferenceScores:
        """Mean undiscounted returns of the uniform-random and scripted expert policies."""
        random_ref = float(self.rollout_returns(self.random_action, REFERENCE_EPISODES, REFERENCE_SEED).mean())
        expert_ref = float(self.rollout_returns(self.expert_policy, REFERENCE_EPISODES, REFERENCE_SEED).mean())
        if not expert_ref > random_ref:
            raise ParameterError(f"{self.name}: expert reference does not beat random")
        logger.debug(f"{self.name} references: random {random_ref:.4f}, expert {expert_ref:.4f}")
        return ReferenceScores(random_ref, expert_ref)

    def normalized_score(self, mean_return: float) -> float:
        ref = self.reference_scores
        return 100.0 * (mean_return - ref.random) / (ref.expert - ref.random)

    def describe(self) -> Dict[str, object]:
        ref = self.reference_scores
        return {"env": self.name, "state_dim": self.state_dim, "action_dim": self.action_dim,
                "horizon": self.horizon, "random_ref": ref.random, "expert_ref": ref.expert}


class _PointEnv(ToyEnv):
    """Point moved by ``step_size * a`` inside [-1, 1]^d; reward 1 - distance to target, floored at 0."""

    def __init__(self, target, step_size: float = 0.25, reward_noise: float = 0.0, horizon: int = 20):
        self.target = np.atleast_1d(np.asarray(target, dtype=float))
        if np.any(np.abs(self.target) > 1):
            raise ParameterError("target must lie in [-1, 1]")
        if not step_size > 0:
            raise ParameterError(f"step_size must be > 0, got {step_size!r}")
        if reward_noise < 0:
            raise ParameterError(f"reward_noise must be >= 0, got {reward_noise!r}")
        if horizon < 1:
            raise ParameterError(f"horizon must be >= 1, got {horizon!r}")
        self.state_dim = self.action_dim = self.target.size
        self.step_size = step_size
        self.reward_noise = reward_noise
        self.horizon = horizon

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, self.state_dim))

    def step(self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> StepResult:
        actions = np.clip(actions, -1.0, 1.0)
        next_states = np.clip(states + self.step_size * actions, -1.0, 1.0)
        distance = np.linalg.norm(next_states - self.target, axis=1)
        rewards = np.maximum(0.0, 1.0 - distance)
        if self.reward_noise:
            rewards = rewards + self.reward_noise * rng.standard_normal(rewards.shape)
        return StepResult(next_states, rewards, np.zeros(states.shape[0], dtype=bool))

    def expert_action(self, states: np.ndarray) -> np.ndarray:
        return np.clip((self.target - states) / self.step_size, -1.0, 1.0)


class PushEnv(_PointEnv):
    """1-D push: move a block along [-1, 1] onto the target position."""

    name = "push"

    def __init__(self, target: float = 0.5, step_size: float = 0.25, reward_noise: float = 0.0, horizon: int = 20):
        super().__init__([target], step_size, reward_noise, horizon)


class ReachEnv(_PointEnv):
    """2-D reach: steer a point in the unit square onto a goal."""

    name = "reach"

    def __init__(self, target=(0.5, -0.3), step_size: float = 0.25, reward_noise: float = 0.0, horizon: int = 20):
        super().__init__(target, step_size, reward_noise, horizon)


class TabularEnv(ToyEnv):
    """A finite MDP seen through one-hot states and a binned scalar action.

    Action ``a`` in [-1, 1] selects bin ``floor((a + 1) / 2 * A)``; the
    expert plays the center of the greedy bin of Q*.
    """

    name = "tabular"
    action_dim = 1

    def __init__(self, mdp: FiniteMdp, horizon: int = 20):
        if horizon < 1:
            raise ParameterError(f"horizon must be >= 1, got {horizon!r}")
        self.mdp = mdp
        self.state_dim = mdp.n_states
        self.horizon = horizon

    @classmethod
    def random(cls, n_states: int, n_actions: int, seed: int, discount: float = 0.9, horizon: int = 20) -> "TabularEnv":
        return cls(random_mdp(n_states, n_actions, seed, discount=discount), horizon)

    def action_bin(self, actions: np.ndarray) -> np.ndarray:
        a = np.clip(np.asarray(actions, dtype=float)[:, 0], -1.0, 1.0)
        return np.minimum(((a + 1.0) / 2.0 * self.mdp.n_actions).astype(int), self.mdp.n_actions - 1)

    def bin_center(self, bins: np.ndarray) -> np.ndarray:
        return ((np.asarray(bins) + 0.5) / self.mdp.n_actions * 2.0 - 1.0)[:, None]

    def state_index(self, states: np.ndarray) -> np.ndarray:
        return np.argmax(states, axis=1)

    def one_hot(self, index: np.ndarray) -> np.ndarray:
        return np.eye(self.mdp.n_states)[index]

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.one_hot(rng.choice(self.mdp.n_states, size=n, p=self.mdp.initial_dist))

    def step(self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> StepResult:
        s = self.state_index(states)
        a = self.action_bin(actions)
        probs = self.mdp.transition[s, a]
        # inverse-CDF draw per row
        u = rng.uniform(size=(len(s), 1))
        s_next = np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), self.mdp.n_states - 1)
        return StepResult(self.one_hot(s_next), self.mdp.reward[s, a], self.mdp.terminal_mask[s_next].copy())

    @cached_property
    def optimal_q(self) -> np.ndarray:
        return value_iteration(self.mdp)

    def expert_action(self, states: np.ndarray) -> np.ndarray:
        return self.bin_center(np.argmax(self.optimal_q[self.state_index(states)], axis=1))


ENVS: Dict[str, Callable[..., ToyEnv]] = {
    "push": PushEnv,
    "push-noisy": lambda: PushEnv(reward_noise=0.2),
    "reach": ReachEnv,
    "tabular": lambda: TabularEnv.random(2, 2, seed=0),
}


def make_env(name: str) -> ToyEnv:
    try:
        return ENVS[name]()
    except KeyError:
        raise ParameterError(f"unknown environment {name!r}, expected one of {sorted(ENVS)}")


def generate_dataset(
    env: ToyEnv,
    n_episodes: int,
    expert_fraction: float,
    seed: int,
    expert_noise: float = 0.1,
) -> OfflineDataset:
    """Mixed-quality offline data: expert episodes first, then uniform-random ones.

    Expert actions get Gaussian noise of scale ``expert_noise``. Episode
    ``i`` uses its own seed stream.

    Raises:
        ParameterError: If n_episodes < 1 or expert_fraction is outside [0, 1]
    """
    if n_episodes < 1:
        raise ParameterError(f"n_episodes must be >= 1, got {n_episodes!r}")
    if not (0 <= expert_fraction <= 1):
        raise ParameterError(f"expert_fraction must be in [0, 1], got {expert_fraction!r}")
    n_expert = int(round(expert_fraction * n_episodes))
    records: List[TransitionRecord] = []
    for episode, stream in enumerate(spawn_seeds(seed, n_episodes)):
        rng = np.random.default_rng(stream)
        state = env.reset(rng, 1)
        for _ in range(env.horizon):
            if episode < n_expert:
                action = env.expert_action(state) + expert_noise * rng.standard_normal((1, env.action_dim))
            else:
                action = env.random_action(state, rng)
            action = np.clip(action, -1.0, 1.0)
            result = env.step(state, action, rng)
            done = bool(result.dones[0])
            records.append(TransitionRecord(
                tuple(map(float, state[0])), tuple(map(float, action[0])), float(result.rewards[0]),
                tuple(map(float, result.next_states[0])), done, episode))
            state = result.next_states
            if done:
                break
    logger.info(f"generated {len(records)} transitions on {env.name} ({n_expert}/{n_episodes} expert episodes)")
    return OfflineDataset(records, discrete=False, seed=seed, generator=f"{env.name}:{expert_fraction}")


def check_compatible(env: ToyEnv, dataset: OfflineDataset) -> Tuple[int, int]:
    """Raise unless ``dataset`` has ``env``'s state and action dimensions."""
    if (dataset.state_dim, dataset.action_dim) != (env.state_dim, env.action_dim):
        raise ParameterError(
            f"dataset dims {(dataset.state_dim, dataset.action_dim)} do not match "
            f"{env.name} dims {(env.state_dim, env.action_dim)}")
    return env.state_dim, env.action_dim
