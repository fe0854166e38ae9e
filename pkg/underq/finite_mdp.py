"""
Finite MDPs, tabular value functions and offline transition datasets.

The dataset format is shared by the tabular and continuous halves of the
package: discrete datasets hold one-element state/action vectors carrying
the index, continuous ones hold fixed-length real vectors.
"""

import math
from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from packaging.version import InvalidVersion, Version

from .error import ConvergenceError, FormatError, ParameterError
from .helpers import check_stochastic_rows, format_real, parse_real, spawn_seeds

logger = getLogger(__name__)

QTable = np.ndarray
VTable = np.ndarray

DATASET_MAGIC = "underq-dataset"
DATASET_VERSION = Version("1")

TransitionBatch = namedtuple(
    "TransitionBatch", "states,actions,rewards,next_states,dones")


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Tabular MDP ``<S, A, P, r, rho0, gamma>`` with per-state terminal flags.

    Arrays are frozen (read-only) after construction.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    discount: float
    terminal_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        reward = np.array(self.reward, dtype=float)
        initial = np.array(self.initial_dist, dtype=float)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ParameterError(
                f"transition must have shape (S, A, S), got {transition.shape}")
        n_states, n_actions = transition.shape[:2]
        if n_states < 1 or n_actions < 1:
            raise ParameterError("an MDP needs at least one state and action")
        if reward.shape != (n_states, n_actions):
            raise ParameterError(
                f"reward must have shape {(n_states, n_actions)}, got {reward.shape}")
        if not np.all(np.isfinite(reward)):
            raise ParameterError("rewards must be finite")
        if initial.shape != (n_states,):
            raise ParameterError(
                f"initial_dist must have shape ({n_states},), got {initial.shape}")
        check_stochastic_rows(transition, "transition")
        check_stochastic_rows(initial, "initial_dist")
        if not (0 < self.discount < 1):
            raise ParameterError(
                f"discount must be in (0, 1), got {self.discount!r}")
        if self.terminal_mask is None:
            terminal = np.zeros(n_states, dtype=bool)
        else:
            terminal = np.array(self.terminal_mask, dtype=bool)
            if terminal.shape != (n_states,):
                raise ParameterError(
                    f"terminal_mask must have shape ({n_states},)")
        for name, value in (("transition", transition), ("reward", reward),
                            ("initial_dist", initial), ("terminal_mask", terminal)):
            value.flags.writeable = False
            object.__setattr__(self, name, value)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def continuation(self) -> np.ndarray:
        """1 for non-terminal next states, 0 where bootstrapping is masked."""
        return 1.0 - self.terminal_mask.astype(float)

    def reward_bound(self) -> float:
        """r_max / (1 - gamma), the magnitude bound of converged Q-tables."""
        return float(np.max(np.abs(self.reward))) / (1.0 - self.discount)


@dataclass(frozen=True)
class TransitionRecord:
    """One offline transition ``(s, a, r, s', done)``.

    ``episode`` is bookkeeping for return computation and is neither
    serialized nor compared.
    """

    state: Tuple[float, ...]
    action: Tuple[float, ...]
    reward: float
    next_state: Tuple[float, ...]
    done: bool
    episode: int = field(default=0, compare=False)


@dataclass
class OfflineDataset:
    """A non-empty, dimensionally homogeneous collection of transitions."""

    records: List[TransitionRecord]
    discrete: bool = False
    seed: int = 0
    generator: str = ""
    _arrays: Optional[TransitionBatch] = field(
        default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.records:
            raise ParameterError("a dataset must hold at least one record")
        first = self.records[0]
        for record in self.records:
            if (len(record.state) != len(first.state)
                    or len(record.next_state) != len(first.state)
                    or len(record.action) != len(first.action)):
                raise ParameterError(
                    "dataset records must share state and action dimensions")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def state_dim(self) -> int:
        return len(self.records[0].state)

    @property
    def action_dim(self) -> int:
        return len(self.records[0].action)

    def arrays(self) -> TransitionBatch:
        """Column arrays of the dataset (computed once)."""
        if self._arrays is None:
            self._arrays = TransitionBatch(
                np.array([r.state for r in self.records], dtype=float),
                np.array([r.action for r in self.records], dtype=float),
                np.array([r.reward for r in self.records], dtype=float),
                np.array([r.next_state for r in self.records], dtype=float),
                np.array([r.done for r in self.records], dtype=float),
            )
        return self._arrays

    def sample(self, rng: np.random.Generator, batch_size: int) -> TransitionBatch:
        if batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {batch_size!r}")
        idx = rng.integers(0, len(self.records), size=batch_size)
        columns = self.arrays()
        return TransitionBatch(*(column[idx] for column in columns))

    def episode_returns(self, discount: float) -> np.ndarray:
        """Discounted return of each episode, in episode order."""
        returns = {}
        steps = {}
        for record in self.records:
            k = steps.get(record.episode, 0)
            returns[record.episode] = (returns.get(record.episode, 0.0)
                                       + discount ** k * record.reward)
            steps[record.episode] = k + 1
        return np.array([returns[e] for e in sorted(returns)])


def random_mdp(
    n_states: int,
    n_actions: int,
    seed: int,
    sparsity: float = 1.0,
    discount: float = 0.9,
) -> FiniteMdp:
    """Random MDP with Dirichlet transition rows on a random support.

    Each row puts mass on ``ceil(sparsity * n_states)`` next states; rewards
    are uniform in [0, 1].

    Raises:
        ParameterError: On degenerate sizes or sparsity outside (0, 1]
    """
    if n_states < 1 or n_actions < 1:
        raise ParameterError(
            f"n_states and n_actions must be >= 1, got {n_states}, {n_actions}")
    if not (0 < sparsity <= 1):
        raise ParameterError(f"sparsity must be in (0, 1], got {sparsity!r}")
    rng = np.random.default_rng(seed)
    support = max(1, math.ceil(sparsity * n_states))
    transition = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            cols = rng.choice(n_states, size=support, replace=False)
            transition[s, a, cols] = rng.dirichlet(np.ones(support))
    transition /= transition.sum(axis=-1, keepdims=True)
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    initial = np.full(n_states, 1.0 / n_states)
    return FiniteMdp(transition, reward, initial, discount)


def uniform_policy(mdp: FiniteMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def greedy_policy(q: QTable) -> np.ndarray:
    """Deterministic policy picking the first maximizing action per state."""
    policy = np.zeros_like(q, dtype=float)
    policy[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return policy


def mixture_policy(first: np.ndarray, second: np.ndarray, weight: float) -> np.ndarray:
    """``weight * first + (1 - weight) * second``."""
    if not (0 <= weight <= 1):
        raise ParameterError(f"weight must be in [0, 1], got {weight!r}")
    return weight * np.asarray(first) + (1 - weight) * np.asarray(second)


def _check_policy(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError(
            f"policy must have shape {(mdp.n_states, mdp.n_actions)}, "
            f"got {policy.shape}")
    check_stochastic_rows(policy, "policy")
    return policy


def rollout(
    mdp: FiniteMdp,
    policy: np.ndarray,
    horizon: int,
    n_episodes: int,
    seed: int,
    generator: str = "rollout",
) -> OfflineDataset:
    """Collect ``n_episodes`` episodes of at most ``horizon`` steps.

    Episodes stop early on reaching a terminal state. Episode ``i`` draws
    from its own seed stream, so the dataset depends only on the inputs.

    Raises:
        ParameterError: If horizon or n_episodes is < 1 or a policy row is
            not a distribution
    """
    if horizon < 1:
        raise ParameterError(f"horizon must be >= 1, got {horizon!r}")
    if n_episodes < 1:
        raise ParameterError(f"n_episodes must be >= 1, got {n_episodes!r}")
    policy = _check_policy(mdp, policy)
    records: List[TransitionRecord] = []
    for episode, stream in enumerate(spawn_seeds(seed, n_episodes)):
        rng = np.random.default_rng(stream)
        s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
        for _ in range(horizon):
            a = int(rng.choice(mdp.n_actions, p=policy[s]))
            s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
            done = bool(mdp.terminal_mask[s_next])
            records.append(TransitionRecord(
                (float(s),), (float(a),), float(mdp.reward[s, a]),
                (float(s_next),), done, episode))
            s = s_next
            if done:
                break
    logger.debug(
        f"rollout produced {len(records)} records over {n_episodes} episodes")
    return OfflineDataset(records, discrete=True, seed=seed, generator=generator)


def discounted_returns(dataset: OfflineDataset, discount: float) -> np.ndarray:
    """Per-episode discounted returns of a dataset.

    Raises:
        ParameterError: If discount is outside [0, 1]
    """
    if not (0 <= discount <= 1):
        raise ParameterError(f"discount must be in [0, 1], got {discount!r}")
    return dataset.episode_returns(discount)


def policy_values(mdp: FiniteMdp, q: QTable, policy: np.ndarray) -> VTable:
    """E_{a ~ pi(.|s)} Q(s, a) per state."""
    return np.sum(policy * q, axis=1)


def policy_evaluation(
    mdp: FiniteMdp,
    policy: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 1_000_000,
) -> QTable:
    """Iterate the policy Bellman operator to its fixed point Q^pi.

    Stops once the sup-norm change between sweeps falls below ``tol``.

    Raises:
        ParameterError: On an invalid policy, tolerance or budget
        ConvergenceError: If ``max_iters`` sweeps do not reach ``tol``
    """
    if max_iters < 1:
        raise ParameterError(f"max_iters must be >= 1, got {max_iters!r}")
    if not tol > 0:
        raise ParameterError(f"tol must be > 0, got {tol!r}")
    policy = _check_policy(mdp, policy)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for iteration in range(max_iters):
        v_next = policy_values(mdp, q, policy) * mdp.continuation
        q_new = mdp.reward + mdp.discount * mdp.transition @ v_next
        delta = float(np.max(np.abs(q_new - q)))
        q = q_new
        if delta < tol:
            logger.debug(f"policy evaluation converged after {iteration + 1} sweeps")
            break
    else:
        raise ConvergenceError(
            f"policy evaluation did not reach tol {tol} in {max_iters} sweeps (last change {delta:.3e})")
    return q


def policy_evaluation_linear(mdp: FiniteMdp, policy: np.ndarray) -> QTable:
    """Solve ``(I - gamma P^pi) Q = r`` directly."""
    policy = _check_policy(mdp, policy)
    n = mdp.n_states * mdp.n_actions
    # P^pi[(s,a), (s',a')] = P(s'|s,a) * continuation(s') * pi(a'|s')
    masked = mdp.transition * mdp.continuation[None, None, :]
    p_pi = (masked[:, :, :, None] * policy[None, None, :, :]).reshape(n, n)
    q = np.linalg.solve(np.eye(n) - mdp.discount * p_pi, mdp.reward.reshape(n))
    return q.reshape(mdp.n_states, mdp.n_actions)


def _header_line(dataset: OfflineDataset) -> str:
    return (f"{DATASET_MAGIC} v{DATASET_VERSION}, {dataset.state_dim}, "
            f"{dataset.action_dim}, discrete:{int(dataset.discrete)}, "
            f"{len(dataset)}, {dataset.seed}")


def dataset_to_text(dataset: OfflineDataset) -> str:
    lines = [_header_line(dataset)]
    for record in dataset.records:
        values = [*record.state, *record.action, record.reward, *record.next_state]
        fields = [format_real(v) for v in values] + [str(int(record.done))]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def save_dataset(dataset: OfflineDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(dataset_to_text(dataset))
    logger.info(f"wrote {len(dataset)} records to {path}")
    return path


def _parse_header(line: str) -> Tuple[int, int, bool, int, int]:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 6 or not parts[0].startswith(DATASET_MAGIC + " v"):
        raise FormatError(f"not an {DATASET_MAGIC} header: {line!r}")
    try:
        version = Version(parts[0][len(DATASET_MAGIC) + 2:])
    except InvalidVersion:
        raise FormatError(f"invalid dataset version in header: {line!r}")
    if version.major != DATASET_VERSION.major:
        raise FormatError(
            f"unsupported dataset version {version}, expected {DATASET_VERSION}")
    if not parts[3].startswith("discrete:") or parts[3][9:] not in ("0", "1"):
        raise FormatError(f"invalid discrete flag in header: {parts[3]!r}")
    try:
        return (int(parts[1]), int(parts[2]), parts[3][9:] == "1",
                int(parts[4]), int(parts[5]))
    except ValueError:
        raise FormatError(f"invalid integer field in header: {line!r}")


def dataset_from_text(text: str, generator: str = "file") -> OfflineDataset:
    """Parse the dataset file format.

    Raises:
        FormatError: On a malformed header, record or count mismatch
    """
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise FormatError("empty dataset file")
    state_dim, action_dim, discrete, count, seed = _parse_header(lines[0])
    width = 2 * state_dim + action_dim + 2
    records = []
    episode = 0
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != width:
            raise FormatError(
                f"line {number}: expected {width} fields, got {len(fields)}")
        try:
            values = [parse_real(f) for f in fields[:-1]]
        except ValueError as e:
            raise FormatError(f"line {number}: {e}")
        if fields[-1].strip() not in ("0", "1"):
            raise FormatError(f"line {number}: done flag must be 0 or 1")
        done = fields[-1].strip() == "1"
        state = tuple(values[:state_dim])
        action = tuple(values[state_dim:state_dim + action_dim])
        reward = values[state_dim + action_dim]
        next_state = tuple(values[state_dim + action_dim + 1:])
        records.append(TransitionRecord(
            state, action, reward, next_state, done, episode))
        if done:
            episode += 1
    if len(records) != count:
        raise FormatError(
            f"header announces {count} records, file holds {len(records)}")
    return OfflineDataset(records, discrete=discrete, seed=seed, generator=generator)


def load_dataset(path: Union[str, Path]) -> OfflineDataset:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"dataset file not found: {path}")
    return dataset_from_text(path.read_text(), generator=str(path))


def dataset_from_arrays(
    states: Sequence, actions: Sequence, rewards: Sequence,
    next_states: Sequence, dones: Sequence, episodes: Sequence,
    discrete: bool = False, seed: int = 0, generator: str = "",
) -> OfflineDataset:
    records = [
        TransitionRecord(tuple(map(float, np.atleast_1d(s))),
                         tuple(map(float, np.atleast_1d(a))), float(r),
                         tuple(map(float, np.atleast_1d(s2))), bool(d), int(e))
        for s, a, r, s2, d, e in zip(states, actions, rewards, next_states,
                                     dones, episodes)
    ]
    return OfflineDataset(records, discrete=discrete, seed=seed, generator=generator)
