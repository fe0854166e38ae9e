"""
Asymmetric squared loss ``L_tau(u) = |tau - 1(u < 0)| * u^2`` and expectiles.

Convention: ``tau`` is the weight on over-predictions when the residual is
``u = prediction - target`` (the PAPER_LITERAL convention). Values above 0.5
push the fitted value below the target mean. Hyperparameter tables written
in the IQL reading (``u = target - prediction``) are converted with
``tau_from_preset``.
"""

import enum
from dataclasses import dataclass
from logging import getLogger
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .error import NumericalCheckError, ParameterError
from .helpers import check_probability_vector

logger = getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

BISECTION_TOLERANCE = 1e-10
MAX_BISECTION_STEPS = 200
CONVENTION_TOLERANCE = 1e-12


class Convention(enum.Enum):
    PAPER_LITERAL = "paper_literal"
    UNDERESTIMATE_IQL = "underestimate_iql"


def _check_tau(tau: float) -> None:
    if not (0 < tau < 1):
        raise ParameterError(f"tau must be in (0, 1), got {tau!r}")


@dataclass(frozen=True)
class ExpectileLoss:
    """The loss L_tau with a validated level."""

    tau: float

    def __post_init__(self):
        _check_tau(self.tau)

    def __call__(self, u: ArrayLike) -> ArrayLike:
        return loss(self.tau, u)

    def grad(self, u: ArrayLike) -> ArrayLike:
        return loss_grad(self.tau, u)


def _weight(tau: float, u: np.ndarray) -> np.ndarray:
    return np.where(u < 0, 1.0 - tau, tau)


def _scalar_or_array(value: np.ndarray, like: ArrayLike) -> ArrayLike:
    return float(value) if np.ndim(like) == 0 else value


def loss(tau: float, u: ArrayLike) -> ArrayLike:
    """``tau * u^2`` for u >= 0, ``(1 - tau) * u^2`` otherwise.

    Raises:
        ParameterError: If tau is outside (0, 1)
    """
    _check_tau(tau)
    arr = np.asarray(u, dtype=float)
    return _scalar_or_array(_weight(tau, arr) * arr ** 2, u)


def loss_grad(tau: float, u: ArrayLike) -> ArrayLike:
    """d/du of the loss; zero at the tie u = 0."""
    _check_tau(tau)
    arr = np.asarray(u, dtype=float)
    return _scalar_or_array(2.0 * _weight(tau, arr) * arr, u)


def expectile_batch_loss(tau: float, residuals: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean loss over a batch of residuals and its gradient per residual."""
    _check_tau(tau)
    u = np.asarray(residuals, dtype=float)
    w = _weight(tau, u)
    return float(np.mean(w * u ** 2)), 2.0 * w * u / u.size


def _refine(samples: np.ndarray, weights: np.ndarray, tau: float,
            estimate: np.ndarray) -> np.ndarray:
    """Exact solve of the piecewise-linear first-order condition.

    With the split of samples above/below ``estimate`` fixed, the condition
    ``tau * sum w (x - e)+ = (1 - tau) * sum w (e - x)+`` is linear in e.
    """
    above = samples > estimate
    a = np.where(above, tau, 1.0 - tau) * weights
    refined = np.sum(a * samples, axis=0) / np.sum(a, axis=0)
    # Keep the bracketed estimate if the split moved (refinement crossed a sample).
    consistent = np.all((samples > refined) == above, axis=0)
    return np.where(consistent, refined, estimate)


def solve_expectile(
    samples: Sequence[float],
    weights: Optional[Sequence[float]] = None,
    tau: float = 0.5,
) -> float:
    """The tau-expectile: argmin_e sum_i w_i L_tau(x_i - e).

    Bisection on the first-order condition to ``BISECTION_TOLERANCE``
    followed by an exact linear refinement. The result lies between the
    smallest and largest sample.

    Raises:
        ParameterError: On empty samples, bad weights or tau
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ParameterError("samples must be a non-empty 1-D sequence")
    if weights is None:
        w = np.full(x.size, 1.0 / x.size)
    else:
        w = check_probability_vector(weights)
        if w.size != x.size:
            raise ParameterError(
                f"weights has {w.size} entries for {x.size} samples")
    return float(solve_expectile_batch(x[:, None], tau, w[:, None])[0])


def solve_expectile_batch(
    samples: np.ndarray, tau: float, weights: Optional[np.ndarray] = None
) -> np.ndarray:
    """Column-wise expectiles of a (m, k) sample matrix."""
    _check_tau(tau)
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError("samples must be a non-empty (m, k) array")
    w = np.full_like(x, 1.0 / x.shape[0]) if weights is None else np.broadcast_to(weights, x.shape)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    for _ in range(MAX_BISECTION_STEPS):
        if np.all(hi - lo <= BISECTION_TOLERANCE):
            break
        mid = 0.5 * (lo + hi)
        excess = (tau * np.sum(w * np.maximum(x - mid, 0.0), axis=0)
                  - (1.0 - tau) * np.sum(w * np.maximum(mid - x, 0.0), axis=0))
        # The condition is decreasing in e: positive excess means e is too low.
        lo = np.where(excess > 0, mid, lo)
        hi = np.where(excess > 0, hi, mid)
    return _refine(x, w, tau, 0.5 * (lo + hi))


def td_expectile_residual(
    q_pred: ArrayLike,
    reward: ArrayLike,
    q_target_next: ArrayLike,
    gamma: float,
    tau: float,
    convention: Convention = Convention.PAPER_LITERAL,
) -> Tuple[ArrayLike, ArrayLike]:
    """Expectile TD loss and its gradient with respect to ``q_pred`` only.

    The target ``reward + gamma * q_target_next`` is treated as a constant.
    Both conventions describe the same loss surface; the other convention
    is evaluated as a check and a mismatch raises.

    Raises:
        NumericalCheckError: If the two conventions disagree
    """
    _check_tau(tau)
    q_pred = np.asarray(q_pred, dtype=float)
    target = np.asarray(reward, dtype=float) + gamma * np.asarray(q_target_next, dtype=float)
    u_pred = q_pred - target
    pred_loss = _weight(tau, u_pred) * u_pred ** 2
    pred_grad = 2.0 * _weight(tau, u_pred) * u_pred

    u_iql = target - q_pred
    iql_loss = _weight(1.0 - tau, u_iql) * u_iql ** 2
    iql_grad = -2.0 * _weight(1.0 - tau, u_iql) * u_iql

    scale = max(1.0, float(np.max(np.abs(pred_loss))))
    if np.any(np.abs(pred_loss - iql_loss) > CONVENTION_TOLERANCE * scale):
        raise NumericalCheckError(
            "expectile conventions disagree on the TD loss")
    if convention is Convention.PAPER_LITERAL:
        result_loss, result_grad = pred_loss, pred_grad
    else:
        result_loss, result_grad = iql_loss, iql_grad
    if np.ndim(result_loss) == 0:
        return float(result_loss), float(result_grad)
    return result_loss, result_grad


def tau_from_preset(value: float, convention: Convention = Convention.UNDERESTIMATE_IQL) -> float:
    """Map a tabulated tau to the over-prediction weight used internally."""
    _check_tau(value)
    if convention is Convention.PAPER_LITERAL:
        return value
    mapped = 1.0 - value
    logger.debug(f"tau {value} (underestimate_iql) -> {mapped} (paper_literal)")
    return mapped
