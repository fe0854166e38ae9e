"""
Gumbel error model for max-operator value estimates.

Noisy maxima of value estimates are modeled as Gumbel draws. Under MSE
regression the learned value is the Gumbel mean, which sits
``EULER_MASCHERONI * scale`` above the location, and that bias nests
backwards through a trajectory. This module provides the soft-max
(log-sum-exp) operator, the closed-form nested bounds for Q and V, the
error curve ``f(x) = C x gamma^(x - b)`` and Monte-Carlo simulators that
verify the closed forms.
"""

import math
from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .error import DomainError, ParameterError
from .helpers import check_probability_vector, spawn_seeds

logger = getLogger(__name__)

EULER_MASCHERONI = 0.5772156649015329

MIN_MC_SAMPLES = 10_000
LEAST_SQUARES_STREAMS = 10

TARGET_Q = "q"
TARGET_V = "v"
MODE_ANALYTIC = "analytic"
MODE_LEAST_SQUARES = "least_squares"

NestedErrorEstimate = namedtuple(
    "NestedErrorEstimate", "estimated_error,standard_error")
ConsistencyEstimate = namedtuple(
    "ConsistencyEstimate", "residual,combined_standard_error")


@dataclass(frozen=True)
class GumbelParams:
    """Location/scale pair of a Gumbel distribution (mode and spread)."""

    location: float
    scale: float

    def __post_init__(self):
        if not math.isfinite(self.location):
            raise ParameterError(
                f"Gumbel location must be finite, got {self.location!r}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ParameterError(
                f"Gumbel scale must be strictly positive, got {self.scale!r}")

    @property
    def mean(self) -> float:
        return self.location + EULER_MASCHERONI * self.scale

    @property
    def variance(self) -> float:
        return math.pi ** 2 * self.scale ** 2 / 6.0


@dataclass(frozen=True)
class ErrorCurveParams:
    """Parameters of the overestimation error curve f(x) = C x gamma^(x-b)."""

    coefficient: float
    discount: float
    offset: int
    horizon_index: float

    def __post_init__(self):
        _check_discount(self.discount)
        if self.offset not in (1, 2):
            raise ParameterError(
                f"offset must be 1 or 2, got {self.offset!r}")
        if not self.horizon_index >= 0:
            raise ParameterError(
                f"horizon_index must be >= 0, got {self.horizon_index!r}")


@dataclass(frozen=True)
class NestedChainSpec:
    """A deterministic chain of ``horizon`` decisions with Gumbel noise.

    ``rewards`` holds one reward per step (shared by every action) or one
    row of ``actions_per_state`` rewards per step. The noise scale at step
    ``t`` is ``discount ** (horizon - t) * terminal_scale``.
    """

    horizon: int
    terminal_scale: float
    discount: float
    rewards: Tuple = field(default=())
    actions_per_state: int = 1
    mc_samples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ParameterError(f"horizon must be >= 1, got {self.horizon!r}")
        if not (math.isfinite(self.terminal_scale) and self.terminal_scale > 0):
            raise ParameterError(
                f"terminal_scale must be > 0, got {self.terminal_scale!r}")
        _check_discount(self.discount)
        if self.actions_per_state < 1:
            raise ParameterError(
                f"actions_per_state must be >= 1, got {self.actions_per_state!r}")
        if self.mc_samples < 1:
            raise ParameterError(
                f"mc_samples must be >= 1, got {self.mc_samples!r}")
        self.reward_table()

    def reward_table(self) -> np.ndarray:
        """Rewards as a (horizon, actions_per_state) array.

        Raises:
            ParameterError: If the rewards do not match the chain shape
        """
        shape = (self.horizon, self.actions_per_state)
        if len(self.rewards) == 0:
            return np.zeros(shape)
        table = np.asarray(self.rewards, dtype=float)
        if table.ndim == 1 and table.shape[0] == self.horizon:
            table = np.repeat(table[:, None], self.actions_per_state, axis=1)
        if table.shape != shape:
            raise ParameterError(
                f"rewards must have shape ({self.horizon},) or {shape}, "
                f"got {table.shape}"
            )
        if not np.all(np.isfinite(table)):
            raise ParameterError("rewards must be finite")
        return table

    def scale_at(self, t: int) -> float:
        return self.discount ** (self.horizon - t) * self.terminal_scale


def _check_discount(discount: float) -> None:
    if not (0 < discount <= 1):
        raise ParameterError(f"discount must be in (0, 1], got {discount!r}")


def _check_step(T: int, t: int) -> None:
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T!r}")
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t!r}")
    if t > T:
        raise ParameterError(f"t must not exceed T, got t={t!r} > T={T!r}")


def gumbel_moments(params: GumbelParams) -> Tuple[float, float]:
    """Closed-form (mean, variance) of a Gumbel distribution."""
    return params.mean, params.variance


def sample_gumbel(params: GumbelParams, n: int, seed: Optional[int]) -> np.ndarray:
    """Draw ``n`` Gumbel samples by the inverse-CDF transform.

    ``x = location - scale * ln(-ln(u))`` with ``u`` uniform on (0, 1); the
    uniforms come from a generator seeded with ``seed`` so the draws are
    reproducible.

    Raises:
        ParameterError: If n < 1 or params is invalid
    """
    if not isinstance(params, GumbelParams):
        params = GumbelParams(*params)
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n!r}")
    u = np.random.default_rng(seed).random(n)
    # Keep u strictly inside (0, 1) so both logarithms stay finite.
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return params.location - params.scale * np.log(-np.log(u))


def soft_max_operator(
    values: Sequence[float],
    weights: Optional[Sequence[float]] = None,
    beta: float = 1.0,
) -> float:
    """Soft-max operator ``beta * log(sum_i w_i exp(q_i / beta))``.

    Evaluated with max subtraction (scipy's logsumexp), so large values or
    small temperatures do not overflow. Weights default to uniform.

    Raises:
        ParameterError: On empty or non-finite values, a non-positive beta,
            or weights that are not a distribution matching the values
    """
    q = np.asarray(values, dtype=float)
    if q.ndim != 1 or q.size == 0:
        raise ParameterError("values must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(q)):
        raise ParameterError("values must be finite")
    if not (beta > 0):
        raise ParameterError(f"beta must be > 0, got {beta!r}")
    if weights is None:
        w = np.full(q.size, 1.0 / q.size)
    else:
        w = check_probability_vector(weights)
        if w.size != q.size:
            raise ParameterError(
                f"weights has {w.size} entries for {q.size} values")
    return float(beta * logsumexp(q / beta, b=w))


def soft_max_rows(values: np.ndarray, beta: float) -> np.ndarray:
    """Uniform-weight soft-max over the last axis of ``values``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    return beta * (logsumexp(values / beta, axis=-1) - math.log(n))


def theorem1_bound(T: int, t: int, gamma: float, beta: float) -> float:
    """Nested Q overestimation ``(T - t + 1) * gamma_e * gamma^(T-t) * beta``.

    Raises:
        ParameterError: If t is outside [1, T], gamma outside (0, 1] or beta <= 0
    """
    return _nested_bound(T, t, gamma, beta, extra=1)


def theorem2_bound(T: int, t: int, gamma: float, beta: float) -> float:
    """Nested V overestimation ``(T - t + 2) * gamma_e * gamma^(T-t) * beta``."""
    return _nested_bound(T, t, gamma, beta, extra=2)


def _nested_bound(T: int, t: int, gamma: float, beta: float, extra: int) -> float:
    _check_step(T, t)
    _check_discount(gamma)
    if not beta > 0:
        raise ParameterError(f"beta must be > 0, got {beta!r}")
    return (T - t + extra) * EULER_MASCHERONI * gamma ** (T - t) * beta


def _noise_free_q(spec: NestedChainSpec) -> np.ndarray:
    """Optimal Q per step (rows 1..T, plus a zero terminal row T+1)."""
    rewards = spec.reward_table()
    q = np.zeros((spec.horizon + 2, spec.actions_per_state))
    for k in range(spec.horizon, 0, -1):
        q[k] = rewards[k - 1] + spec.discount * soft_max_rows(
            q[k + 1], spec.scale_at(k + 1))
    return q


def _analytic_mse_q(spec: NestedChainSpec, down_to: int) -> np.ndarray:
    """MSE-optimal Q with the Gumbel mean bias injected at each step >= down_to."""
    rewards = spec.reward_table()
    q = np.zeros((spec.horizon + 2, spec.actions_per_state))
    for k in range(spec.horizon, down_to - 1, -1):
        location = rewards[k - 1] + spec.discount * soft_max_rows(
            q[k + 1], spec.scale_at(k + 1))
        q[k] = location + EULER_MASCHERONI * spec.scale_at(k)
    return q


def simulate_nested_error(
    spec: NestedChainSpec,
    t: int,
    target: str = TARGET_Q,
    mode: str = MODE_ANALYTIC,
) -> NestedErrorEstimate:
    """Monte-Carlo estimate of the nested overestimation at step ``t``.

    Runs the MSE-expectation recursion backwards from the horizon. In the
    analytic mode every step after ``t`` carries its Gumbel mean bias in
    closed form and only step ``t`` is sampled: the estimate is the mean of
    ``mc_samples`` Gumbel draws minus the noise-free optimal value, with a
    standard error from the per-draw spread.

    In the least-squares mode every step from the horizon down to ``t`` is
    sampled and the learned value of each action is the least-squares
    constant fitted to its draws, so sampling noise propagates through the
    chain; the standard error comes from independent seed streams.

    Args:
        spec: Chain to simulate
        t: Step (1-based) whose value error is reported
        target: "q" for Q(s_t, a_t) with a_t the first action, "v" for V(s_t)
        mode: "analytic" or "least_squares"

    Returns:
        (estimated_error, standard_error)

    Raises:
        ParameterError: On an invalid step, target, mode or too few samples
    """
    _check_step(spec.horizon, t)
    if spec.mc_samples < MIN_MC_SAMPLES:
        raise ParameterError(
            f"mc_samples must be >= {MIN_MC_SAMPLES} for a simulation, "
            f"got {spec.mc_samples}"
        )
    if target not in (TARGET_Q, TARGET_V):
        raise ParameterError(f"target must be 'q' or 'v', got {target!r}")
    if mode == MODE_ANALYTIC:
        estimate = _simulate_analytic(spec, t, target)
    elif mode == MODE_LEAST_SQUARES:
        estimate = _simulate_least_squares(spec, t, target)
    else:
        raise ParameterError(
            f"mode must be 'analytic' or 'least_squares', got {mode!r}")
    logger.debug(
        f"nested {target} error T={spec.horizon} t={t} "
        f"gamma={spec.discount} beta={spec.terminal_scale}: "
        f"{estimate.estimated_error:.6g} +/- {estimate.standard_error:.3g}"
    )
    return estimate


def _simulate_analytic(
    spec: NestedChainSpec, t: int, target: str
) -> NestedErrorEstimate:
    optimal = _noise_free_q(spec)
    scale_t = spec.scale_at(t)
    if target == TARGET_Q:
        biased = _analytic_mse_q(spec, down_to=t + 1)
        rewards = spec.reward_table()
        location = rewards[t - 1][0] + spec.discount * float(
            soft_max_rows(biased[t + 1], spec.scale_at(t + 1)))
        truth = optimal[t][0]
    else:
        biased = _analytic_mse_q(spec, down_to=t)
        location = float(soft_max_rows(biased[t], scale_t))
        truth = float(soft_max_rows(optimal[t], scale_t))

    draws = sample_gumbel(GumbelParams(location, scale_t),
                          spec.mc_samples, spec.seed)
    errors = draws - truth
    return NestedErrorEstimate(
        float(errors.mean()),
        float(errors.std(ddof=1) / math.sqrt(errors.size)),
    )


def _least_squares_constant(samples: np.ndarray) -> float:
    """Minimizer of sum_i (x_i - c)^2, fitted as a regression on a constant."""
    design = np.ones((samples.size, 1))
    coef, *_ = np.linalg.lstsq(design, samples, rcond=None)
    return float(coef[0])


def _simulate_least_squares(
    spec: NestedChainSpec, t: int, target: str
) -> NestedErrorEstimate:
    optimal = _noise_free_q(spec)
    rewards = spec.reward_table()
    per_stream = spec.mc_samples // LEAST_SQUARES_STREAMS
    estimates = []
    for stream in spawn_seeds(spec.seed, LEAST_SQUARES_STREAMS):
        rng = np.random.default_rng(stream)
        learned = np.zeros((spec.horizon + 2, spec.actions_per_state))
        for k in range(spec.horizon, t - 1, -1):
            location = rewards[k - 1] + spec.discount * soft_max_rows(
                learned[k + 1], spec.scale_at(k + 1))
            for a in range(spec.actions_per_state):
                draws = sample_gumbel(
                    GumbelParams(float(location[a]), spec.scale_at(k)),
                    per_stream, int(rng.integers(2 ** 62)))
                learned[k, a] = _least_squares_constant(draws)
        if target == TARGET_Q:
            estimates.append(learned[t][0] - optimal[t][0])
        else:
            scale_t = spec.scale_at(t)
            draws = sample_gumbel(
                GumbelParams(float(soft_max_rows(learned[t], scale_t)), scale_t),
                per_stream, int(rng.integers(2 ** 62)))
            estimates.append(_least_squares_constant(draws)
                             - float(soft_max_rows(optimal[t], scale_t)))
    values = np.asarray(estimates)
    return NestedErrorEstimate(
        float(values.mean()),
        float(values.std(ddof=1) / math.sqrt(values.size)),
    )


def theorem3_consistency(spec: NestedChainSpec, t: int) -> float:
    """|Q~(s_t, a_t) - (r_t + gamma * V~(s_{t+1}))| from the closed forms.

    Q~ uses the nested Q bound at ``t`` and V~ the nested V bound at
    ``t + 1``; both share the noise-free soft-max of the next step. At
    ``t = horizon`` the next state is terminal, whose soft-max is zero.
    """
    _check_step(spec.horizon, t)
    T, gamma, beta = spec.horizon, spec.discount, spec.terminal_scale
    optimal = _noise_free_q(spec)
    reward = spec.reward_table()[t - 1][0]
    next_soft_max = float(soft_max_rows(optimal[t + 1], spec.scale_at(t + 1)))

    q_tilde = (reward + gamma * next_soft_max
               + (T - t + 1) * EULER_MASCHERONI * gamma ** (T - t) * beta)
    v_tilde_next = (next_soft_max
                    + (T - t + 1) * EULER_MASCHERONI * gamma ** (T - t - 1) * beta)
    return abs(q_tilde - (reward + gamma * v_tilde_next))


def theorem3_mc_residual(
    spec: NestedChainSpec, t: int, mode: str = MODE_ANALYTIC
) -> ConsistencyEstimate:
    """Monte-Carlo form of the Q/V consistency identity.

    Since the noise-free values satisfy Q_t = r_t + gamma * V_{t+1}, the
    identity reduces to ``err_Q(t) = gamma * err_V(t + 1)``. Both errors are
    simulated with the chain's seed (common random numbers).

    Raises:
        ParameterError: If t is not below the horizon
    """
    if t >= spec.horizon:
        raise ParameterError(
            f"t must be below the horizon for a next-step V, got t={t!r}")
    q_err = simulate_nested_error(spec, t, TARGET_Q, mode)
    v_err = simulate_nested_error(spec, t + 1, TARGET_V, mode)
    residual = abs(q_err.estimated_error - spec.discount * v_err.estimated_error)
    combined = math.sqrt(q_err.standard_error ** 2
                         + (spec.discount * v_err.standard_error) ** 2)
    return ConsistencyEstimate(residual, combined)


def error_curve(params: ErrorCurveParams) -> float:
    """f(x) = C * x * gamma^(x - b)."""
    x = params.horizon_index
    return params.coefficient * x * params.discount ** (x - params.offset)


def error_curve_argmax(discount: float) -> float:
    """Maximizer ``-1 / ln(gamma)`` of the error curve.

    Raises:
        DomainError: If discount is 1 (the curve grows without bound)
        ParameterError: If discount is outside (0, 1]
    """
    _check_discount(discount)
    if discount == 1:
        raise DomainError(
            "error curve has no finite maximizer when discount = 1")
    return -1.0 / math.log(discount)


def error_curve_table(
    discount: float, coefficient: float = 1.0, offset: int = 1, max_x: int = 500
) -> np.ndarray:
    """f sampled on x = 0, 1, ..., max_x."""
    ErrorCurveParams(coefficient, discount, offset, 0.0)
    if max_x < 0:
        raise ParameterError(f"max_x must be >= 0, got {max_x!r}")
    x = np.arange(max_x + 1, dtype=float)
    return coefficient * x * discount ** (x - offset)
