"""
Offline actor-critic training with underestimating expectile critics and
a diffusion actor.

Two critics, each fitted with its own expectile level, bootstrap from the
minimum of their target copies at actions drawn from the target actor.
The actor trades the minimum critic value against the denoising loss;
evaluation retains the best-scoring parameters (online model selection).
"""

import math
from collections import namedtuple
from dataclasses import asdict, dataclass, field, fields, replace
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .approx import (INIT_SCHEME, Activation, GradClip, MlpSpec, Network, OptimState, ParamSet, backward, forward,
                     init_params, polyak_update, save_checkpoint)
from .diffusion_policy import (ActorLossWeights, DiffusionSchedule, PolicyNet, actor_loss, make_schedule,
                               sample_actions_batch)
from .envs import ToyEnv, check_compatible
from .error import ParameterError
from .expectile import Convention, td_expectile_residual, tau_from_preset
from .finite_mdp import OfflineDataset, TransitionBatch
from .helpers import RecordWriter, spawn_seeds
from .presets import get_preset

logger = getLogger(__name__)

CRITIC_NAMES = ("critic1", "critic2")
METRIC_FIELDS = ("epoch", "iteration", "critic_loss", "actor_loss", "mean_q", "mean_return",
                 "normalized_score", "best_score", "selected_best")
PROBE_TOLERANCE = 1e-3

CriticStats = namedtuple("CriticStats", "losses,mean_q,mean_target")
ActorStats = namedtuple("ActorStats", "loss,grad_norm")
ProbeResult = namedtuple("ProbeResult", "mean_q_estimate,mc_return_estimate,gap,standard_error")

# (states, actions) -> q values
CriticFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AgentConfig:
    """Training hyperparameters.

    ``tau_q1``/``tau_q2`` are over-prediction weights: values above 0.5
    make a critic underestimate. ``grad_norm`` 0 disables clipping.
    """

    tau_q1: float = 0.9
    tau_q2: float = 0.8
    lr: float = 3e-4
    eta: float = 1.0
    zeta: float = 1.0
    grad_norm: float = 10.0
    n_epochs: int = 50
    iters_per_epoch: int = 200
    batch_size: int = 256
    max_q_backup: bool = False
    k_backup_samples: int = 10
    rho: float = 0.995
    gamma: float = 0.99
    eval_interval_epochs: int = 5
    eval_episodes: int = 10
    seed: int = 0
    hidden: Tuple[int, ...] = (64, 64, 64)
    activation: str = "mish"
    diffusion_steps: int = 5
    beta_min: float = 0.1
    beta_max: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self._validate_config()

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "AgentConfig":
        """Build a config from a named preset; ``overrides`` use the internal tau reading."""
        preset = get_preset(name)
        values = dict(preset.values)
        convention = Convention(preset.tau_convention)
        for key in ("tau_q1", "tau_q2"):
            if key in values:
                values[key] = tau_from_preset(values[key], convention)
        if not values.get("grad_norm"):
            logger.warning(f"preset {name!r}: gradient clipping disabled")
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown AgentConfig fields {sorted(unknown)}")
        values.update(overrides)
        return cls(**values)

    def _validate_config(self) -> None:
        for name in ("tau_q1", "tau_q2"):
            value = getattr(self, name)
            if not (0 < value < 1):
                raise ParameterError(f"{name} must be in (0, 1), got {value!r}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr!r}")
        ActorLossWeights(self.eta, self.zeta)
        GradClip(self.grad_norm)
        for name in ("n_epochs", "iters_per_epoch", "batch_size", "k_backup_samples",
                     "eval_interval_epochs", "eval_episodes", "diffusion_steps"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        if not (0 <= self.rho <= 1):
            raise ParameterError(f"rho must be in [0, 1], got {self.rho!r}")
        if not (0 < self.gamma < 1):
            raise ParameterError(f"gamma must be in (0, 1), got {self.gamma!r}")
        try:
            Activation(self.activation)
        except ValueError:
            raise ParameterError(f"unknown activation {self.activation!r}")
        make_schedule(self.diffusion_steps, self.beta_min, self.beta_max)

    @property
    def weights(self) -> ActorLossWeights:
        return ActorLossWeights(self.eta, self.zeta)

    @property
    def clip(self) -> GradClip:
        return GradClip(self.grad_norm)

    @property
    def taus(self) -> Tuple[float, float]:
        return self.tau_q1, self.tau_q2

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EvalReport:
    epoch: int
    mean_return: float
    normalized_score: float
    mean_q_estimate: Optional[float] = None
    selected_best: bool = False

    def __post_init__(self):
        if not math.isfinite(self.normalized_score):
            raise ParameterError("normalized_score must be finite")


@dataclass
class AgentState:
    """All networks of one agent plus the diffusion schedule."""

    critics: List[Network]
    critic_targets: List[ParamSet]
    actor: Network
    actor_target: ParamSet
    schedule: DiffusionSchedule
    state_dim: int
    action_dim: int
    step: int = 0

    def policy(self, target: bool = False) -> PolicyNet:
        params = self.actor_target if target else self.actor.params
        return PolicyNet(params, self.state_dim, self.action_dim, self.schedule.n_steps)

    def named_params(self) -> Dict[str, ParamSet]:
        named = {"actor": self.actor.params, "actor_target": self.actor_target}
        for name, critic, target in zip(CRITIC_NAMES, self.critics, self.critic_targets):
            named[name] = critic.params
            named[name + "_target"] = target
        return named

    def metadata(self) -> Dict[str, str]:
        return {"state_dim": str(self.state_dim), "action_dim": str(self.action_dim),
                "init": INIT_SCHEME, **{k: str(v) for k, v in self.schedule.metadata().items()}}


def init_agent(cfg: AgentConfig, state_dim: int, action_dim: int) -> AgentState:
    actor_seed, *critic_seeds = (int(s.generate_state(1)[0]) for s in spawn_seeds(cfg.seed, 3))
    schedule = make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
    logger.info(f"diffusion schedule betas {schedule.betas}, alpha_bar_N {schedule.alpha_bar[-1]:.4f}")
    activation = Activation(cfg.activation)
    critic_spec = MlpSpec(state_dim + action_dim, 1, cfg.hidden, activation)
    critics = []
    for seed in critic_seeds:
        params = init_params(critic_spec, seed)
        critics.append(Network(params, OptimState.for_params(params, cfg.lr), cfg.clip))
    policy = PolicyNet.create(state_dim, action_dim, schedule.n_steps, cfg.hidden, activation, actor_seed)
    actor = Network(policy.params, OptimState.for_params(policy.params, cfg.lr), cfg.clip)
    return AgentState(critics, [c.params.copy() for c in critics], actor, policy.params.copy(),
                      schedule, state_dim, action_dim)


def critic_values(params: ParamSet, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return forward(params, np.concatenate([states, actions], axis=1))[:, 0]


def critic_min_fn(critics: Sequence[ParamSet]):
    """min over critics of Q(s, a), with the action gradient of the minimizing critic."""

    def fn(states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        inputs = np.concatenate([states, actions], axis=1)
        values, grads = [], []
        ones = np.ones((states.shape[0], 1))
        for params in critics:
            q, cache = forward(params, inputs, return_cache=True)
            _, g_inputs = backward(params, inputs, ones, cache)
            values.append(q[:, 0])
            grads.append(g_inputs[:, states.shape[1]:])
        values = np.stack(values)
        pick = np.argmin(values, axis=0)
        rows = np.arange(states.shape[0])
        return values[pick, rows], np.stack(grads)[pick, rows]

    return fn


def min_critic_values(critics: Sequence[ParamSet], states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.min([critic_values(p, states, actions) for p in critics], axis=0)


def next_state_values(state: AgentState, batch: TransitionBatch, cfg: AgentConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """min over target critics at target-actor actions for s'.

    With ``max_q_backup`` each target critic first takes its max over
    ``k_backup_samples`` sampled actions.
    """
    s_next = batch.next_states
    b = s_next.shape[0]
    k = cfg.k_backup_samples if cfg.max_q_backup else 1
    repeated = np.repeat(s_next, k, axis=0)
    actions = sample_actions_batch(state.policy(target=True), state.schedule, repeated, rng).actions
    per_critic = [critic_values(p, repeated, actions).reshape(b, k).max(axis=1)
                  for p in state.critic_targets]
    return np.min(per_critic, axis=0)


def fit_critics(state: AgentState, batch: TransitionBatch, v_next: np.ndarray, cfg: AgentConfig) -> CriticStats:
    """One expectile-TD step per critic against ``r + gamma * (1 - done) * v_next``."""
    inputs = np.concatenate([batch.states, batch.actions], axis=1)
    bootstrap = (1.0 - batch.dones) * v_next
    b = inputs.shape[0]
    losses, q_means = [], []
    for critic, tau in zip(state.critics, cfg.taus):
        q, cache = forward(critic.params, inputs, return_cache=True)
        loss, grad_u = td_expectile_residual(q[:, 0], batch.rewards, bootstrap, cfg.gamma, tau)
        grads, _ = backward(critic.params, inputs, (grad_u / b)[:, None], cache)
        critic.apply_gradient(grads)
        losses.append(float(np.mean(loss)))
        q_means.append(float(np.mean(q)))
    target = batch.rewards + cfg.gamma * bootstrap
    return CriticStats(tuple(losses), float(np.mean(q_means)), float(np.mean(target)))


def critic_update(state: AgentState, batch: TransitionBatch, cfg: AgentConfig,
                  rng: np.random.Generator) -> CriticStats:
    """Bootstrap targets from the target networks, then step both critics.

    Raises:
        ParameterError: On an empty batch
    """
    if batch.states.shape[0] == 0:
        raise ParameterError("empty batch")
    return fit_critics(state, batch, next_state_values(state, batch, cfg, rng), cfg)


def actor_update(state: AgentState, batch: TransitionBatch, cfg: AgentConfig,
                 rng: np.random.Generator) -> ActorStats:
    """One actor step on ``-eta * min Q + zeta * denoise`` with the online critics."""
    result = actor_loss(state.policy(), state.schedule, critic_min_fn([c.params for c in state.critics]),
                        batch.states, batch.actions, cfg.weights, rng)
    norm = state.actor.apply_gradient(result.grad)
    return ActorStats(result.loss, norm)


def update_targets(state: AgentState, cfg: AgentConfig) -> None:
    state.critic_targets = [polyak_update(t, c.params, cfg.rho)
                            for t, c in zip(state.critic_targets, state.critics)]
    state.actor_target = polyak_update(state.actor_target, state.actor.params, cfg.rho)


def policy_fn(policy: PolicyNet, schedule: DiffusionSchedule):
    def act(states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return sample_actions_batch(policy, schedule, states, rng).actions
    return act


def evaluate_policy(policy, env: ToyEnv, n_episodes: int, seed: int, epoch: int = 0,
                    mean_q_estimate: Optional[float] = None) -> EvalReport:
    """Roll out ``policy`` (states, rng -> actions) and score it against the env references."""
    if n_episodes < 1:
        raise ParameterError(f"n_episodes must be >= 1, got {n_episodes!r}")
    returns = env.rollout_returns(policy, n_episodes, seed)
    mean_return = float(np.mean(returns))
    return EvalReport(epoch, mean_return, env.normalized_score(mean_return), mean_q_estimate)


def evaluate(actor: PolicyNet, schedule: DiffusionSchedule, env: ToyEnv, n_episodes: int, seed: int,
             epoch: int = 0, mean_q_estimate: Optional[float] = None) -> EvalReport:
    return evaluate_policy(policy_fn(actor, schedule), env, n_episodes, seed, epoch, mean_q_estimate)


def probe_horizon(gamma: float, tolerance: float = PROBE_TOLERANCE) -> int:
    """Steps after which the discounted tail is below ``tolerance`` of the total."""
    return int(math.ceil(math.log(tolerance) / math.log(gamma)))


def overestimation_probe(
    critic: CriticFn,
    policy,
    dataset: OfflineDataset,
    env: ToyEnv,
    gamma: float,
    n_states: int = 128,
    seed: int = 0,
) -> ProbeResult:
    """Compare critic values on dataset (s, a) pairs with Monte-Carlo returns.

    Each sampled pair seeds a fresh rollout that plays ``a`` first and then
    ``policy``; returns are discounted by ``gamma`` over ``probe_horizon``
    steps. ``gap`` is mean critic value minus mean return.
    """
    check_compatible(env, dataset)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=min(n_states, len(dataset)), replace=False)
    columns = dataset.arrays()
    states, actions = columns.states[idx], columns.actions[idx]
    q = np.asarray(critic(states, actions), dtype=float)
    mc = env.rollout_returns(policy, len(idx), seed + 1, discount=gamma, start_states=states,
                             first_actions=actions, horizon=probe_horizon(gamma))
    diff = q - mc
    se = float(np.std(diff, ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
    result = ProbeResult(float(q.mean()), float(mc.mean()), float(diff.mean()), se)
    logger.info(f"overestimation probe: mean Q {result.mean_q_estimate:.4f}, "
                f"MC return {result.mc_return_estimate:.4f}, gap {result.gap:.4f} +- {se:.4f}")
    return result


def probe_agent(state: AgentState, dataset: OfflineDataset, env: ToyEnv, gamma: float,
                n_states: int = 128, seed: int = 0) -> ProbeResult:
    critics = [c.params for c in state.critics]
    return overestimation_probe(lambda s, a: min_critic_values(critics, s, a),
                                policy_fn(state.policy(), state.schedule), dataset, env, gamma, n_states, seed)


@dataclass
class TrainResult:
    state: AgentState
    reports: List[EvalReport]
    best_params: Dict[str, ParamSet]
    best_report: EvalReport
    checkpoints: List[Path] = field(default_factory=list)


def train(
    dataset: OfflineDataset,
    env: ToyEnv,
    cfg: AgentConfig,
    out_dir: Optional[Path] = None,
    metrics: Optional[RecordWriter] = None,
) -> TrainResult:
    """Run the full loop: critic step, actor step, target averaging per iteration.

    Every ``eval_interval_epochs`` epochs (and after the last) the actor
    is evaluated; the best normalized score so far is kept as the selected
    model. With ``out_dir`` every evaluation writes a checkpoint and the
    selected one is mirrored to ``best.ckpt``.

    Raises:
        ParameterError: If the dataset does not match the environment
    """
    state_dim, action_dim = check_compatible(env, dataset)
    state = init_agent(cfg, state_dim, action_dim)
    train_seed, eval_seed = (int(s.generate_state(1)[0]) for s in spawn_seeds(cfg.seed + 1, 2))
    rng = np.random.default_rng(train_seed)
    reports: List[EvalReport] = []
    checkpoints: List[Path] = []
    best_params: Dict[str, ParamSet] = {}
    best_report: Optional[EvalReport] = None
    critic_stats: Optional[CriticStats] = None
    actor_stats: Optional[ActorStats] = None

    for epoch in range(1, cfg.n_epochs + 1):
        for _ in range(cfg.iters_per_epoch):
            batch = dataset.sample(rng, cfg.batch_size)
            critic_stats = critic_update(state, batch, cfg, rng)
            actor_stats = actor_update(state, batch, cfg, rng)
            update_targets(state, cfg)
            state.step += 1
        logger.debug(f"epoch {epoch}: critic losses {critic_stats.losses}, actor loss {actor_stats.loss:.4f}")
        if epoch % cfg.eval_interval_epochs and epoch != cfg.n_epochs:
            continue

        probe_batch = dataset.sample(np.random.default_rng(eval_seed), min(len(dataset), 1024))
        mean_q = float(np.mean(min_critic_values([c.params for c in state.critics],
                                                 probe_batch.states, probe_batch.actions)))
        report = evaluate(state.policy(), state.schedule, env, cfg.eval_episodes, eval_seed, epoch, mean_q)
        best = best_report is None or report.normalized_score > best_report.normalized_score
        report = replace(report, selected_best=best)
        reports.append(report)
        if best:
            best_report = report
            best_params = {k: v.copy() for k, v in state.named_params().items()}
            logger.info(f"epoch {epoch}: new best normalized score {report.normalized_score:.2f}")
        else:
            logger.info(f"epoch {epoch}: normalized score {report.normalized_score:.2f}")
        if metrics is not None:
            metrics.write({
                "epoch": epoch, "iteration": state.step,
                "critic_loss": float(np.mean(critic_stats.losses)), "actor_loss": actor_stats.loss,
                "mean_q": mean_q, "mean_return": report.mean_return,
                "normalized_score": report.normalized_score,
                "best_score": best_report.normalized_score, "selected_best": best,
            })
        if out_dir is not None:
            meta = state.metadata()
            path = save_checkpoint(Path(out_dir) / f"epoch_{epoch:05d}.ckpt", state.named_params(),
                                   cfg.seed, state.step, meta)
            checkpoints.append(path)
            if best:
                save_checkpoint(Path(out_dir) / "best.ckpt", best_params, cfg.seed, state.step,
                                {**meta, "epoch": str(epoch)})

    return TrainResult(state, reports, best_params, best_report, checkpoints)


def policy_from_checkpoint(params: Dict[str, ParamSet], meta: Dict[str, str]) -> Tuple[PolicyNet, DiffusionSchedule]:
    """Rebuild the actor and its schedule from checkpoint contents."""
    try:
        betas = tuple(float(b) for b in meta["diffusion_betas"].split(";"))
        state_dim, action_dim = int(meta["state_dim"]), int(meta["action_dim"])
        actor = params["actor"]
    except (KeyError, ValueError) as e:
        raise ParameterError(f"checkpoint lacks actor metadata: {e}")
    schedule = DiffusionSchedule(betas)
    return PolicyNet(actor, state_dim, action_dim, schedule.n_steps), schedule


def critics_from_checkpoint(params: Dict[str, ParamSet]) -> List[ParamSet]:
    try:
        return [params[name] for name in CRITIC_NAMES]
    except KeyError as e:
        raise ParameterError(f"checkpoint lacks critic {e}")
