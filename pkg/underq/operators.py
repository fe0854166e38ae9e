"""
Bellman operators on tabular Q-functions.

Besides the policy and optimal backups, the underestimated quantile
operator applies an ``iota``-level reduction to the optimal target. A
quantile of a deterministic target only has meaning under an implied
reading, so three are provided:

- ``SCALING``: multiply the target by iota;
- ``NOISY_QUANTILE``: the iota-quantile of the target distribution obtained
  by adding Gumbel(0, beta) noise to Q(s', a') before the max;
- ``EXPECTILE``: the tau-expectile of that same noisy target sample.
"""

import enum
from collections import namedtuple
from dataclasses import dataclass
from logging import getLogger
from typing import List, Optional

import numpy as np

from .error import ConvergenceError, DomainError, ParameterError
from .expectile import solve_expectile_batch
from .finite_mdp import FiniteMdp, QTable, policy_values

logger = getLogger(__name__)

MIN_NOISE_DRAWS = 1000
CONTRACTION_SLACK = 1e-9

FixedPointResult = namedtuple(
    "FixedPointResult", "q,iterations,final_residual,residuals")


class Interpretation(enum.Enum):
    SCALING = "scaling"
    NOISY_QUANTILE = "quantile"
    EXPECTILE = "expectile"


@dataclass(frozen=True)
class UnderestimateConfig:
    """Settings of the underestimated operator.

    ``noise_scale``, ``n_noise`` and ``seed`` only matter for the noisy
    readings; ``tau`` only for the expectile reading. The noise is drawn
    from ``seed`` on every application, so two Q-tables backed up with the
    same config see common random numbers.
    """

    iota: float = 1.0
    interpretation: Interpretation = Interpretation.SCALING
    noise_scale: float = 0.0
    tau: float = 0.5
    n_noise: int = MIN_NOISE_DRAWS
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.interpretation, Interpretation):
            object.__setattr__(
                self, "interpretation", Interpretation(self.interpretation))
        if self.iota == 0:
            raise DomainError("iota = 0 collapses the operator to a constant")
        if not (0 < self.iota <= 1):
            raise ParameterError(f"iota must be in (0, 1], got {self.iota!r}")
        if not self.noise_scale >= 0:
            raise ParameterError(
                f"noise_scale must be >= 0, got {self.noise_scale!r}")
        if self.interpretation is Interpretation.EXPECTILE and not (0 < self.tau < 1):
            raise ParameterError(f"tau must be in (0, 1), got {self.tau!r}")
        if self.interpretation is not Interpretation.SCALING and self.n_noise < MIN_NOISE_DRAWS:
            raise ParameterError(
                f"n_noise must be >= {MIN_NOISE_DRAWS}, got {self.n_noise!r}")

    def modulus_bound(self, discount: float) -> float:
        """Sup-norm contraction modulus the reading is checked against."""
        if self.interpretation is Interpretation.SCALING:
            return self.iota * discount
        return discount


@dataclass(frozen=True)
class ContractionReport:
    interpretation: str
    iota: float
    gamma: float
    pairs_tested: int
    max_ratio: float
    constant_shift_ratio: float
    bound: float
    passed: bool

    def as_record(self) -> dict:
        return dict(self.__dict__)


def _check_q(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError(
            f"Q-table must have shape {(mdp.n_states, mdp.n_actions)}, got {q.shape}")
    return q


def _masked_max(q: np.ndarray, policy_mask: Optional[np.ndarray]) -> np.ndarray:
    """max over a' along the last axis, restricted to allowed actions."""
    if policy_mask is None:
        return q.max(axis=-1)
    return np.where(policy_mask, q, -np.inf).max(axis=-1)


def _check_mask(mdp: FiniteMdp, policy_mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if policy_mask is None:
        return None
    mask = np.asarray(policy_mask, dtype=bool)
    if mask.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError("policy_mask must have the Q-table shape")
    if not np.all(mask.any(axis=1)):
        raise ParameterError("policy_mask must allow an action in every state")
    return mask


def bellman_target(mdp: FiniteMdp, next_values: np.ndarray) -> np.ndarray:
    """r(s, a) + gamma * E_{s'}[v(s')] with bootstrapping masked at terminals."""
    return mdp.reward + mdp.discount * mdp.transition @ (next_values * mdp.continuation)


def standard_backup(mdp: FiniteMdp, q: QTable, policy: np.ndarray) -> QTable:
    """One sweep of the policy Bellman operator."""
    q = _check_q(mdp, q)
    return bellman_target(mdp, policy_values(mdp, q, policy))


def optimal_backup(mdp: FiniteMdp, q: QTable, policy_mask: Optional[np.ndarray] = None) -> QTable:
    """One synchronous sweep of the optimal Bellman operator."""
    q = _check_q(mdp, q)
    return bellman_target(mdp, _masked_max(q, _check_mask(mdp, policy_mask)))


def noisy_targets(
    mdp: FiniteMdp,
    q: QTable,
    cfg: UnderestimateConfig,
    noise: Optional[np.ndarray] = None,
    policy_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """(m, S, A) sample of targets with Gumbel noise added before the max."""
    q = _check_q(mdp, q)
    if noise is None:
        rng = np.random.default_rng(cfg.seed)
        noise = rng.gumbel(0.0, 1.0, size=(cfg.n_noise, mdp.n_states, mdp.n_actions))
    noise = np.asarray(noise, dtype=float)
    if noise.shape[1:] != q.shape:
        raise ParameterError(f"noise must have shape (m, {q.shape[0]}, {q.shape[1]})")
    maxes = _masked_max(q[None] + cfg.noise_scale * noise, _check_mask(mdp, policy_mask))
    # (m, S') -> (m, S, A)
    expected = np.einsum("ias,ms->mia", mdp.transition, maxes * mdp.continuation)
    return mdp.reward[None] + mdp.discount * expected


def underestimated_backup(
    mdp: FiniteMdp,
    q: QTable,
    cfg: UnderestimateConfig,
    policy_mask: Optional[np.ndarray] = None,
    noise: Optional[np.ndarray] = None,
) -> QTable:
    """One sweep of the underestimated quantile operator under ``cfg``'s reading.

    Args:
        mdp: The MDP
        q: Current Q-table
        cfg: Operator settings
        policy_mask: Optional (S, A) boolean restriction of the max over a'
        noise: Optional (m, S, A) standard Gumbel draws replacing the
            config's seeded draws

    Returns:
        The backed-up Q-table
    """
    if cfg.interpretation is Interpretation.SCALING:
        return cfg.iota * optimal_backup(mdp, q, policy_mask)
    if cfg.noise_scale == 0 and noise is None:
        # Every draw equals the deterministic target; its quantile and
        # expectile are that point.
        return optimal_backup(mdp, q, policy_mask)
    targets = noisy_targets(mdp, q, cfg, noise, policy_mask)
    if cfg.interpretation is Interpretation.NOISY_QUANTILE:
        return np.quantile(targets, cfg.iota, axis=0, method="linear")
    flat = targets.reshape(targets.shape[0], -1)
    return solve_expectile_batch(flat, cfg.tau).reshape(q.shape)


def _sup(x: np.ndarray) -> float:
    return float(np.max(np.abs(x)))


def verify_contraction(
    mdp: FiniteMdp,
    cfg: UnderestimateConfig,
    n_pairs: int,
    q_range: float = 10.0,
    seed: int = 0,
) -> ContractionReport:
    """Measure the sup-norm modulus of the operator on random Q-pairs.

    Pairs are uniform on [-q_range, q_range]; a constant-shift pair
    Q2 = Q1 + c is always added, since it attains the modulus for the
    shift-equivariant readings. ``passed`` compares the largest observed
    ratio against ``cfg.modulus_bound``.

    Raises:
        DomainError: If iota * gamma is zero
        ParameterError: If n_pairs < 1 or q_range <= 0
    """
    if cfg.iota * mdp.discount <= 0:
        raise DomainError("iota * gamma must be positive")
    if n_pairs < 1:
        raise ParameterError(f"n_pairs must be >= 1, got {n_pairs!r}")
    if not q_range > 0:
        raise ParameterError(f"q_range must be > 0, got {q_range!r}")
    rng = np.random.default_rng(seed)
    shape = (mdp.n_states, mdp.n_actions)
    ratios: List[float] = []
    for _ in range(n_pairs):
        q1 = rng.uniform(-q_range, q_range, size=shape)
        q2 = rng.uniform(-q_range, q_range, size=shape)
        distance = _sup(q1 - q2)
        if distance == 0:
            continue
        diff = underestimated_backup(mdp, q1, cfg) - underestimated_backup(mdp, q2, cfg)
        ratios.append(_sup(diff) / distance)

    q1 = rng.uniform(-q_range, q_range, size=shape)
    shift = 0.5 * q_range
    diff = underestimated_backup(mdp, q1 + shift, cfg) - underestimated_backup(mdp, q1, cfg)
    shift_ratio = _sup(diff) / shift
    ratios.append(shift_ratio)

    bound = cfg.modulus_bound(mdp.discount)
    max_ratio = max(ratios)
    report = ContractionReport(
        interpretation=cfg.interpretation.value,
        iota=cfg.iota,
        gamma=mdp.discount,
        pairs_tested=len(ratios),
        max_ratio=max_ratio,
        constant_shift_ratio=shift_ratio,
        bound=bound,
        passed=max_ratio <= bound + CONTRACTION_SLACK,
    )
    logger.info(
        f"contraction {report.interpretation}: max ratio {max_ratio:.6f} "
        f"vs bound {bound:.6f} over {report.pairs_tested} pairs")
    return report


def fixed_point(
    mdp: FiniteMdp,
    cfg: UnderestimateConfig,
    tol: float = 1e-10,
    max_iters: int = 100_000,
    q0: Optional[QTable] = None,
    policy_mask: Optional[np.ndarray] = None,
) -> FixedPointResult:
    """Iterate Q <- T^iota Q until the sup-norm step falls below ``tol``.

    Returns:
        (q, iterations, final_residual, residuals)

    Raises:
        ConvergenceError: If max_iters sweeps do not reach tol
    """
    if not tol > 0:
        raise ParameterError(f"tol must be > 0, got {tol!r}")
    q = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else _check_q(mdp, q0).copy()
    residuals: List[float] = []
    for iteration in range(1, max_iters + 1):
        q_next = underestimated_backup(mdp, q, cfg, policy_mask)
        residual = _sup(q_next - q)
        residuals.append(residual)
        q = q_next
        if residual < tol:
            logger.debug(
                f"fixed point ({cfg.interpretation.value}, iota={cfg.iota}) "
                f"reached in {iteration} sweeps")
            return FixedPointResult(q, iteration, residual, residuals)
    raise ConvergenceError(
        f"no fixed point within {max_iters} sweeps, last residual {residuals[-1]!r}")


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10, q0: Optional[QTable] = None) -> QTable:
    """Classical optimal Q* (the iota = 1 scaled fixed point)."""
    return fixed_point(mdp, UnderestimateConfig(iota=1.0), tol=tol, q0=q0).q


def underestimation_gap(mdp: FiniteMdp, cfg: UnderestimateConfig, tol: float = 1e-10) -> np.ndarray:
    """Q* minus the fixed point of the underestimated operator, per (s, a)."""
    return value_iteration(mdp, tol) - fixed_point(mdp, cfg, tol).q
