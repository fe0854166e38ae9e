"""
State-conditioned denoising diffusion policy.

The noise predictor is a dense network over ``[noisy action, state,
one-hot(step)]``. Sampling runs the ancestral chain with fixed posterior
variances; every Gaussian draw is an explicit input, so a sampled action
is a deterministic function of (parameters, state, noise) and can be
differentiated with respect to the parameters.
"""

import math
from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .approx import (Activation, DEFAULT_HIDDEN, GradClip, MlpSpec, Network, OptimState, ParamSet,
                     backward, forward, init_params)
from .error import ParameterError

logger = getLogger(__name__)

DEFAULT_STEPS = 5
DEFAULT_BETA_MIN = 0.1
DEFAULT_BETA_MAX = 0.8
ACTION_BOUND = 1.0

# (q values (B,), dq/da (B, action_dim))
CriticFn = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]

SampleResult = namedtuple("SampleResult", "actions,backward")
LossResult = namedtuple("LossResult", "loss,grad")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise variances and their cumulative signal fractions.

    ``alpha_bar[0]`` is 1; ``alpha_bar[n]`` is the product of (1 - beta_k)
    for k <= n. ``betas[n - 1]`` is the variance added at step n.
    """

    betas: Tuple[float, ...]
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)
    posterior_variance: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size == 0:
            raise ParameterError("a schedule needs at least one step")
        if not np.all((betas > 0) & (betas < 1)):
            raise ParameterError(f"every beta must lie in (0, 1), got {self.betas}")
        object.__setattr__(self, "betas", tuple(float(b) for b in betas))
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        posterior = np.zeros_like(alpha_bar)
        posterior[1:] = betas * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        alpha_bar.setflags(write=False)
        posterior.setflags(write=False)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "posterior_variance", posterior)

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def beta(self, n: int) -> float:
        return self.betas[n - 1]

    def metadata(self) -> dict:
        return {"diffusion_steps": self.n_steps,
                "diffusion_betas": ";".join(repr(b) for b in self.betas)}


def make_schedule(
    n_steps: int = DEFAULT_STEPS,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> DiffusionSchedule:
    """Variance-preserving schedule for a short chain.

    ``log(1 - beta_n)`` is interpolated linearly from ``log(1 - beta_min)``
    at n = 1 to ``log(1 - beta_max)`` at n = N, so the signal retained per
    step decays geometrically. A single-step chain uses ``beta_max``.

    Raises:
        ParameterError: If n_steps < 1 or the endpoints are outside (0, 1)
            or out of order
    """
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps!r}")
    if not (0 < beta_min < 1) or not (0 < beta_max < 1):
        raise ParameterError(
            f"beta endpoints must lie in (0, 1), got {beta_min!r} and {beta_max!r}")
    if beta_min > beta_max:
        raise ParameterError("beta_min must not exceed beta_max")
    if n_steps == 1:
        return DiffusionSchedule((beta_max,))
    grid = np.linspace(math.log1p(-beta_min), math.log1p(-beta_max), n_steps)
    return DiffusionSchedule(tuple(-np.expm1(grid)))


def forward_noise(schedule: DiffusionSchedule, actions: np.ndarray, n, noise: np.ndarray) -> np.ndarray:
    """``sqrt(alpha_bar_n) * a + sqrt(1 - alpha_bar_n) * eps``; ``n`` may be per-row."""
    ab = schedule.alpha_bar[np.asarray(n)]
    actions = np.asarray(actions, dtype=float)
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * actions + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=float)


@dataclass(frozen=True)
class ActorLossWeights:
    eta: float
    zeta: float

    def __post_init__(self):
        if self.eta < 0 or self.zeta < 0:
            raise ParameterError(f"eta and zeta must be >= 0, got {self.eta!r}, {self.zeta!r}")
        if self.eta == 0 and self.zeta == 0:
            raise ParameterError("eta and zeta cannot both be zero")


class PolicyNet:
    """Noise predictor ``eps_phi(a^n, s, n)`` with actions bounded to [-1, 1]."""

    def __init__(self, params: ParamSet, state_dim: int, action_dim: int, n_steps: int):
        if params.spec.input_dim != action_dim + state_dim + n_steps:
            raise ParameterError("network input must be action_dim + state_dim + n_steps")
        if params.spec.output_dim != action_dim:
            raise ParameterError("network output must be action_dim")
        self.params = params
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_steps = n_steps

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        n_steps: int = DEFAULT_STEPS,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        activation: Activation = Activation.MISH,
        seed: int = 0,
    ) -> "PolicyNet":
        spec = MlpSpec(action_dim + state_dim + n_steps, action_dim, tuple(hidden), activation)
        return cls(init_params(spec, seed), state_dim, action_dim, n_steps)

    def with_params(self, params: ParamSet) -> "PolicyNet":
        return PolicyNet(params, self.state_dim, self.action_dim, self.n_steps)

    def inputs(self, noisy: np.ndarray, states: np.ndarray, steps: np.ndarray) -> np.ndarray:
        steps = np.broadcast_to(np.asarray(steps), (noisy.shape[0],))
        one_hot = np.eye(self.n_steps)[steps - 1]
        return np.concatenate([noisy, states, one_hot], axis=1)

    def predict_noise(self, noisy: np.ndarray, states: np.ndarray, steps: np.ndarray) -> np.ndarray:
        return forward(self.params, self.inputs(noisy, states, steps))


def _check_batch(net: PolicyNet, states: np.ndarray, actions: Optional[np.ndarray] = None):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[1] != net.state_dim:
        raise ParameterError(f"states must have {net.state_dim} columns, got {states.shape}")
    if states.shape[0] == 0:
        raise ParameterError("empty batch")
    if actions is None:
        return states
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if actions.shape != (states.shape[0], net.action_dim):
        raise ParameterError(f"actions must have shape {(states.shape[0], net.action_dim)}")
    return states, actions


def denoise_loss(
    net: PolicyNet,
    schedule: DiffusionSchedule,
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    steps: Optional[np.ndarray] = None,
    noise: Optional[np.ndarray] = None,
) -> LossResult:
    """Mean over the batch of ``||eps - eps_phi(a^n, s, n)||^2``.

    ``n`` is uniform on {1..N} and ``eps`` standard normal unless given.
    """
    states, actions = _check_batch(net, states, actions)
    b = states.shape[0]
    if steps is None:
        steps = rng.integers(1, schedule.n_steps + 1, size=b)
    if noise is None:
        noise = rng.standard_normal(actions.shape)
    noisy = forward_noise(schedule, actions, steps, noise)
    inputs = net.inputs(noisy, states, steps)
    predicted = net.predict_noise(noisy, states, steps)
    err = predicted - noise
    value = float(np.sum(err ** 2) / b)
    grad, _ = backward(net.params, inputs, 2.0 * err / b)
    return LossResult(value, grad)


def _chain_coefficients(schedule: DiffusionSchedule, n: int) -> Tuple[float, float, float, float, float]:
    """(1/sqrt(ab_n), sqrt(1 - ab_n), a0 weight, a^n weight, sigma) of reverse step n."""
    beta = schedule.beta(n)
    ab, ab_prev = schedule.alpha_bar[n], schedule.alpha_bar[n - 1]
    inv_root = 1.0 / math.sqrt(ab)
    noise_root = math.sqrt(1.0 - ab)
    k0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    kn = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    sigma = math.sqrt(schedule.posterior_variance[n]) if n > 1 else 0.0
    return inv_root, noise_root, k0, kn, sigma


def sample_actions_batch(
    net: PolicyNet,
    schedule: DiffusionSchedule,
    states: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    reparameterized: bool = False,
    noise: Optional[np.ndarray] = None,
) -> SampleResult:
    """Run the reverse chain from a^N ~ N(0, I) to a^0 in [-1, 1].

    Each step predicts a^0 from the noise estimate, clips it to the action
    box and takes the Gaussian posterior mean given (a^0, a^n). At n = 1
    the posterior mean is the clipped prediction itself.

    ``noise`` has shape (N, batch, action_dim): row 0 is a^N, row k the
    draw added after step N - k + 1; the last row is unused since the final
    step adds no noise. When ``reparameterized``, ``backward(upstream)``
    maps dLoss/d(action) to the flat parameter gradient.
    """
    states = _check_batch(net, states)
    b = states.shape[0]
    n_steps = schedule.n_steps
    if noise is None:
        if rng is None:
            raise ParameterError("either rng or noise is required")
        noise = rng.standard_normal((n_steps, b, net.action_dim))
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (n_steps, b, net.action_dim):
        raise ParameterError(f"noise must have shape {(n_steps, b, net.action_dim)}")

    a = noise[0]
    tape: List[Tuple[Tuple[float, ...], np.ndarray, object]] = []
    for k, n in enumerate(range(n_steps, 0, -1)):
        coeffs = _chain_coefficients(schedule, n)
        inv_root, noise_root, k0, kn, sigma = coeffs
        inputs = net.inputs(a, states, n)
        if reparameterized:
            eps, cache = forward(net.params, inputs, return_cache=True)
        else:
            eps, cache = forward(net.params, inputs), None
        a0 = inv_root * (a - noise_root * eps)
        inside = np.abs(a0) < ACTION_BOUND
        if reparameterized:
            tape.append((coeffs, inside, cache))
        a = k0 * np.clip(a0, -ACTION_BOUND, ACTION_BOUND) + kn * a
        if n > 1:
            a = a + sigma * noise[k + 1]
    actions = np.clip(a, -ACTION_BOUND, ACTION_BOUND)

    if not reparameterized:
        return SampleResult(actions, None)

    def backward_fn(upstream: np.ndarray) -> np.ndarray:
        g = np.asarray(upstream, dtype=float)
        grad = np.zeros_like(net.params.flat)
        for (inv_root, noise_root, k0, kn, _), inside, cache in reversed(tape):
            g0 = k0 * g * inside
            g_params, g_inputs = backward(net.params, None, -inv_root * noise_root * g0, cache)
            grad += g_params
            g = kn * g + inv_root * g0 + g_inputs[:, :net.action_dim]
        return grad

    return SampleResult(actions, backward_fn)


def sample_action(
    net: PolicyNet,
    schedule: DiffusionSchedule,
    state: np.ndarray,
    seed: int,
    reparameterized: bool = False,
) -> np.ndarray:
    """One action for one state; identical for identical (params, state, seed)."""
    rng = np.random.default_rng(seed)
    result = sample_actions_batch(net, schedule, np.atleast_2d(state), rng, reparameterized)
    return result.actions[0]


def actor_loss(
    net: PolicyNet,
    schedule: DiffusionSchedule,
    critic_min: CriticFn,
    states: np.ndarray,
    actions: np.ndarray,
    weights: ActorLossWeights,
    rng: np.random.Generator,
) -> LossResult:
    """``-eta * mean Q(s, pi(s)) + zeta * denoise_loss`` and its parameter gradient.

    ``actions`` are the behavior actions of the batch (for the denoising
    term). The critic is frozen: only its action gradient is used.
    """
    states, actions = _check_batch(net, states, actions)
    loss = 0.0
    grad = np.zeros_like(net.params.flat)
    # The denoising term draws from rng first so eta = 0 gives exactly zeta * L_d.
    if weights.zeta > 0:
        d = denoise_loss(net, schedule, states, actions, rng)
        loss += weights.zeta * d.loss
        grad += weights.zeta * d.grad
    if weights.eta > 0:
        sampled = sample_actions_batch(net, schedule, states, rng, reparameterized=True)
        q, dq_da = critic_min(states, sampled.actions)
        b = states.shape[0]
        loss -= weights.eta * float(np.mean(q))
        grad += sampled.backward(-weights.eta * np.asarray(dq_da) / b)
    return LossResult(loss, grad)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sample energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    return float(2.0 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


def bimodal_actions(n: int, modes: Sequence[float] = (-0.8, 0.8), spread: float = 0.05,
                    seed: int = 0) -> np.ndarray:
    """(n, 1) behavior actions drawn evenly from Gaussian bumps at ``modes``."""
    rng = np.random.default_rng(seed)
    centers = rng.choice(np.asarray(modes, dtype=float), size=n)
    return np.clip(centers + spread * rng.standard_normal(n), -ACTION_BOUND, ACTION_BOUND)[:, None]


def behavior_clone(
    net: PolicyNet,
    schedule: DiffusionSchedule,
    states: np.ndarray,
    actions: np.ndarray,
    steps: int,
    batch_size: int = 256,
    learning_rate: float = 1e-3,
    seed: int = 0,
    clip: Optional[GradClip] = None,
) -> Tuple[PolicyNet, List[float]]:
    """Fit the noise predictor to a behavior dataset (eta = 0).

    Returns:
        (trained policy, per-step denoising losses)
    """
    states, actions = _check_batch(net, states, actions)
    rng = np.random.default_rng(seed)
    trainer = Network(net.params, OptimState.for_params(net.params, learning_rate), clip or GradClip())
    history: List[float] = []
    for _ in range(steps):
        idx = rng.integers(0, states.shape[0], size=min(batch_size, states.shape[0]))
        result = denoise_loss(net.with_params(trainer.params), schedule, states[idx], actions[idx], rng)
        trainer.apply_gradient(result.grad)
        history.append(result.loss)
    logger.debug(f"behavior cloning: loss {history[0]:.4f} -> {history[-1]:.4f} over {steps} steps")
    return net.with_params(trainer.params), history
