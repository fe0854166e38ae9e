"""
Dense feed-forward approximators with hand-written reverse mode.

Parameters of one network live in a single flat vector; each layer's
weight matrix (fan_in, fan_out) and bias are views into it, so optimizer
updates, Polyak averaging and checkpoints all operate on one array.
"""

import enum
import math
from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from packaging.version import InvalidVersion, Version
from scipy.special import expit

from .error import FormatError, ParameterError
from .helpers import format_real, parse_real

logger = getLogger(__name__)

DEFAULT_HIDDEN = (64, 64, 64)

CHECKPOINT_MAGIC = "underq-checkpoint"
CHECKPOINT_VERSION = Version("1")
INIT_SCHEME = "uniform_fan_in"

Checkpoint = namedtuple("Checkpoint", "params,seed,step,meta")


class Activation(enum.Enum):
    MISH = "mish"
    RELU = "relu"


def mish(x: np.ndarray) -> np.ndarray:
    """x * tanh(softplus(x))."""
    return x * np.tanh(np.logaddexp(0.0, x))


def mish_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(np.logaddexp(0.0, x))
    return t + x * (1.0 - t ** 2) * expit(x)


def _activate(kind: "Activation", z: np.ndarray) -> np.ndarray:
    if kind is Activation.MISH:
        return mish(z)
    return np.maximum(z, 0.0)


def _activate_grad(kind: "Activation", z: np.ndarray) -> np.ndarray:
    if kind is Activation.MISH:
        return mish_grad(z)
    return (z > 0).astype(float)


@dataclass(frozen=True)
class MlpSpec:
    """Topology of a dense network: affine + activation per hidden layer."""

    input_dim: int
    output_dim: int
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN
    activation: Activation = Activation.MISH

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not isinstance(self.activation, Activation):
            object.__setattr__(self, "activation", Activation(self.activation))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ParameterError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ParameterError(f"hidden sizes must be >= 1, got {self.hidden}")

    @property
    def widths(self) -> List[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        w = self.widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


class ParamSet:
    """Flat parameter vector of one network plus its layer index map."""

    def __init__(self, spec: MlpSpec, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (spec.n_params,):
            raise ParameterError(
                f"expected {spec.n_params} parameters for {spec}, got {flat.shape}")
        self.spec = spec
        self.flat = flat
        self.index: List[Tuple[slice, slice]] = []
        offset = 0
        for fan_in, fan_out in spec.layer_shapes:
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            self.index.append((w, b))

    def layers(self, flat: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``flat`` (defaults to this set's parameters)."""
        flat = self.flat if flat is None else flat
        return [(flat[w].reshape(shape), flat[b])
                for (w, b), shape in zip(self.index, self.spec.layer_shapes)]

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        return ParamSet(self.spec, flat)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParamSet) and other.spec == self.spec
                and np.array_equal(other.flat, self.flat))

    def __repr__(self) -> str:
        return f"ParamSet({self.spec}, n={self.flat.size})"


def init_params(spec: MlpSpec, seed: int) -> ParamSet:
    """Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return ParamSet(spec, np.concatenate(chunks))


def zeros_like(spec: MlpSpec) -> ParamSet:
    return ParamSet(spec, np.zeros(spec.n_params))


ForwardCache = namedtuple("ForwardCache", "inputs,pre_activations,activations")


def _as_batch(params: ParamSet, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ParameterError(
            f"input batch must have shape (n, {params.spec.input_dim}), got {np.shape(inputs)}")
    return x


def forward(params: ParamSet, inputs: np.ndarray, return_cache: bool = False):
    """Batched forward pass; the output layer is affine (no activation)."""
    x = _as_batch(params, inputs)
    layers = params.layers()
    pre: List[np.ndarray] = []
    acts: List[np.ndarray] = [x]
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        a = z if i == len(layers) - 1 else _activate(params.spec.activation, z)
        acts.append(a)
    if return_cache:
        return a, ForwardCache(x, pre, acts)
    return a


def backward(
    params: ParamSet,
    inputs: np.ndarray,
    upstream: np.ndarray,
    cache: Optional[ForwardCache] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * forward(inputs))``.

    Returns:
        (flat parameter gradient, input gradient)

    Raises:
        ParameterError: If upstream does not match the output shape
    """
    if cache is None:
        _, cache = forward(params, inputs, return_cache=True)
    n = cache.inputs.shape[0]
    delta = np.asarray(upstream, dtype=float)
    if delta.ndim == 1:
        delta = delta[None, :] if n == 1 and delta.size == params.spec.output_dim else delta[:, None]
    if delta.shape != (n, params.spec.output_dim):
        raise ParameterError(
            f"upstream gradient must have shape {(n, params.spec.output_dim)}, got {delta.shape}")
    grad = np.zeros_like(params.flat)
    layers = params.layers()
    grad_layers = params.layers(grad)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            delta = delta * _activate_grad(params.spec.activation, cache.pre_activations[i])
        gw, gb = grad_layers[i]
        gw[...] = cache.activations[i].T @ delta
        gb[...] = delta.sum(axis=0)
        delta = delta @ w.T
    return grad, delta


@dataclass(frozen=True)
class GradClip:
    """Global-norm clipping; ``max_norm`` None or 0 disables it."""

    max_norm: Optional[float] = None

    def __post_init__(self):
        if self.max_norm is not None and self.max_norm < 0:
            raise ParameterError(f"max_norm must be > 0, got {self.max_norm!r}")

    @property
    def enabled(self) -> bool:
        return bool(self.max_norm)


def clip_grad_norm(grads: np.ndarray, clip: GradClip) -> Tuple[np.ndarray, float]:
    """Rescale ``grads`` so its L2 norm is at most ``clip.max_norm``.

    Returns:
        (clipped gradient, norm before clipping)
    """
    norm = float(np.linalg.norm(grads))
    if clip.enabled and norm > clip.max_norm:
        return grads * (clip.max_norm / norm), norm
    return grads, norm


@dataclass
class OptimState:
    """Adaptive-moment optimizer state for one parameter vector."""

    learning_rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, learning_rate: float, **kwargs) -> "OptimState":
        if not learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {learning_rate!r}")
        return cls(learning_rate, np.zeros_like(params.flat), np.zeros_like(params.flat), **kwargs)


def opt_step(
    params: ParamSet,
    grads: np.ndarray,
    state: OptimState,
    clip: Optional[GradClip] = None,
) -> Tuple[ParamSet, OptimState, float]:
    """Clip then apply one bias-corrected adaptive-moment update.

    Returns:
        (new params, new state, gradient norm before clipping)
    """
    if grads.shape != params.flat.shape or state.first_moment.shape != params.flat.shape:
        raise ParameterError("gradient and optimizer moments must match the parameters")
    grads, norm = clip_grad_norm(grads, clip or GradClip())
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grads ** 2
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    flat = params.flat - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = OptimState(state.learning_rate, m, v, step,
                           state.beta1, state.beta2, state.epsilon)
    return params.with_flat(flat), new_state, norm


def polyak_update(target: ParamSet, online: ParamSet, rho: float) -> ParamSet:
    """``rho * target + (1 - rho) * online``."""
    if not (0 <= rho <= 1):
        raise ParameterError(f"rho must be in [0, 1], got {rho!r}")
    if target.spec != online.spec:
        raise ParameterError("target and online networks must share a spec")
    return target.with_flat(rho * target.flat + (1 - rho) * online.flat)


@dataclass
class Network:
    """A ParamSet with its optimizer state, the unit a learner trains."""

    params: ParamSet
    optim: OptimState
    clip: GradClip = field(default_factory=GradClip)

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return forward(self.params, inputs)

    def apply_gradient(self, grads: np.ndarray) -> float:
        self.params, self.optim, norm = opt_step(self.params, grads, self.optim, self.clip)
        return norm


def _spec_fields(spec: MlpSpec) -> str:
    hidden = ";".join(str(h) for h in spec.hidden) or "-"
    return f"{spec.input_dim},{spec.output_dim},{hidden},{spec.activation.value}"


def _parse_spec(text: str) -> MlpSpec:
    parts = text.split(",")
    if len(parts) != 4:
        raise FormatError(f"invalid network spec {text!r}")
    try:
        hidden = () if parts[2] == "-" else tuple(int(h) for h in parts[2].split(";"))
        return MlpSpec(int(parts[0]), int(parts[1]), hidden, Activation(parts[3]))
    except (ValueError, ParameterError) as e:
        raise FormatError(f"invalid network spec {text!r}: {e}")


def checkpoint_to_text(
    params: Dict[str, ParamSet], seed: int, step: int, meta: Optional[Dict[str, str]] = None
) -> str:
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}", f"seed={seed}", f"step={step}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key}={value}")
    for name in sorted(params):
        p = params[name]
        lines.append(f"params {name} {_spec_fields(p.spec)} {p.flat.size}")
        lines.append(",".join(format_real(v) for v in p.flat))
    return "\n".join(lines) + "\n"


def save_checkpoint(
    path: Union[str, Path],
    params: Dict[str, ParamSet],
    seed: int,
    step: int,
    meta: Optional[Dict[str, str]] = None,
) -> Path:
    path = Path(path)
    path.write_text(checkpoint_to_text(params, seed, step, meta))
    logger.info(f"wrote checkpoint {path} at step {step}")
    return path


def _header_int(line: str, key: str) -> int:
    if not line.startswith(key + "="):
        raise FormatError(f"expected '{key}=' line, got {line!r}")
    try:
        return int(line[len(key) + 1:])
    except ValueError:
        raise FormatError(f"invalid integer in {line!r}")


def checkpoint_from_text(text: str) -> Checkpoint:
    """Parse a checkpoint; values reload bit-exactly.

    Raises:
        FormatError: On a malformed or unsupported checkpoint
    """
    lines = text.splitlines()
    if len(lines) < 3 or not lines[0].startswith(CHECKPOINT_MAGIC + " v"):
        raise FormatError("not an underq checkpoint")
    try:
        version = Version(lines[0][len(CHECKPOINT_MAGIC) + 2:])
    except InvalidVersion:
        raise FormatError(f"invalid checkpoint version line {lines[0]!r}")
    if version.major != CHECKPOINT_VERSION.major:
        raise FormatError(f"unsupported checkpoint version {version}")
    seed = _header_int(lines[1], "seed")
    step = _header_int(lines[2], "step")
    meta: Dict[str, str] = {}
    params: Dict[str, ParamSet] = {}
    i = 3
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta "):
            key, _, value = line[5:].partition("=")
            meta[key] = value
            i += 1
            continue
        parts = line.split(" ")
        if len(parts) != 4 or parts[0] != "params" or i + 1 >= len(lines):
            raise FormatError(f"unexpected checkpoint line {line!r}")
        spec = _parse_spec(parts[2])
        try:
            values = np.array([parse_real(v) for v in lines[i + 1].split(",")])
        except ValueError as e:
            raise FormatError(f"invalid parameter values for {parts[1]}: {e}")
        if values.size != int(parts[3]) or values.size != spec.n_params:
            raise FormatError(f"parameter count mismatch for {parts[1]}")
        params[parts[1]] = ParamSet(spec, values)
        i += 2
    return Checkpoint(params, seed, step, meta)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    return checkpoint_from_text(path.read_text())


def finite_difference_grad(
    params: ParamSet,
    inputs: np.ndarray,
    upstream: np.ndarray,
    indices: Sequence[int],
    h: float = 1e-6,
) -> np.ndarray:
    """Central differences of ``sum(upstream * forward)`` at chosen parameters."""
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        plus = params.flat.copy()
        minus = params.flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = np.sum(upstream * forward(params.with_flat(plus), inputs))
        f_minus = np.sum(upstream * forward(params.with_flat(minus), inputs))
        out[k] = (f_plus - f_minus) / (2 * h)
    return out
