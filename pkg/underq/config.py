"""
Run configuration for the command-line surface.

Values are resolved in increasing priority: key defaults, preset values,
``--config`` file, command-line flags. Config files are flat ``key=value``
text; ``#`` starts a comment. A key outside the command's schema is an
error.
"""

from dataclasses import dataclass, field, fields
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, Union

from .agent import AgentConfig
from .error import FormatError, ParameterError
from .expectile import Convention, tau_from_preset
from .presets import get_preset

logger = getLogger(__name__)

RESOLVED_NAME = "config.resolved"


def parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_ints(text: Union[str, Iterable[int]]) -> Tuple[int, ...]:
    if isinstance(text, str):
        return tuple(int(v) for v in text.split(",") if v.strip())
    return tuple(int(v) for v in text)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _optional(parser: Callable[[str], Any]) -> Callable[[Any], Any]:
    def parse(text):
        return None if text in (None, "", "none", "None") else parser(text)
    return parse


# key -> (parser, default)
KEYS: Dict[str, Tuple[Callable[[Any], Any], Any]] = {
    # gumbel analysis
    "horizon": (int, 5),
    "terminal_scale": (float, 1.0),
    "gamma": (float, 0.9),
    "actions": (int, 1),
    "mc_samples": (int, 1_000_000),
    "target": (str, "q"),
    "mode": (str, "analytic"),
    "coefficient": (float, 1.0),
    "offset": (int, 1),
    "max_x": (int, 500),
    # operators
    "iota": (float, 0.8),
    "interpretation": (str, "scaling"),
    "noise_scale": (float, 0.0),
    "tau": (float, 0.5),
    "n_noise": (int, 1000),
    "pairs": (int, 200),
    "mdps": (int, 20),
    "n_states": (int, 10),
    "n_actions": (int, 3),
    "q_range": (float, 10.0),
    "tol": (float, 1e-10),
    "max_iters": (int, 100_000),
    # data, training, evaluation
    "env": (str, "push"),
    "episodes": (int, 200),
    "expert_fraction": (float, 0.5),
    "expert_noise": (float, 0.1),
    "dataset": (_optional(str), None),
    "checkpoint": (_optional(str), None),
    "probe_states": (int, 128),
}

_AGENT_PARSERS: Dict[str, Callable[[Any], Any]] = {
    "max_q_backup": parse_bool, "hidden": parse_ints, "activation": str,
}
for _f in fields(AgentConfig):
    if _f.name in ("seed", "gamma"):
        continue
    _parser = _AGENT_PARSERS.get(_f.name) or {int: int, float: float, bool: parse_bool}.get(type(_f.default), str)
    KEYS.setdefault(_f.name, (_parser, _f.default))

AGENT_KEYS = tuple(f.name for f in fields(AgentConfig) if f.name != "seed")

# defaults that differ from the shared key default
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "train": {"gamma": AgentConfig.gamma},
    "probe-overestimation": {"gamma": AgentConfig.gamma},
}

COMMAND_KEYS: Dict[str, Tuple[str, ...]] = {
    "simulate-error": ("horizon", "terminal_scale", "gamma", "actions", "mc_samples", "target", "mode"),
    "error-curve": ("gamma", "coefficient", "offset", "max_x"),
    "verify-contraction": ("iota", "interpretation", "noise_scale", "tau", "n_noise", "pairs", "mdps",
                           "n_states", "n_actions", "gamma", "q_range"),
    "fixed-point": ("iota", "interpretation", "noise_scale", "tau", "n_noise", "n_states", "n_actions",
                    "gamma", "tol", "max_iters"),
    "gen-dataset": ("env", "episodes", "expert_fraction", "expert_noise"),
    "train": ("env", "dataset", "episodes", "expert_fraction", "expert_noise") + AGENT_KEYS,
    "eval": ("env", "checkpoint", "episodes"),
    "probe-overestimation": ("env", "checkpoint", "dataset", "gamma", "probe_states"),
}


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a flat ``key=value`` file.

    Raises:
        FormatError: On a missing file, a line without ``=`` or a repeated key
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"config file not found: {path}")
    values: Dict[str, str] = {}
    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise FormatError(f"{path}:{number}: expected key=value, got {raw!r}")
        if key in values:
            raise FormatError(f"{path}:{number}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


@dataclass
class RunConfig:
    """Fully resolved parameters of one command invocation."""

    command: str
    seed: int = 0
    out: Optional[str] = None
    preset: Optional[str] = None
    values: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(
        cls,
        command: str,
        seed: int = 0,
        out: Optional[str] = None,
        preset: Optional[str] = None,
        file_values: Optional[Dict[str, Any]] = None,
        cli_values: Optional[Dict[str, Any]] = None,
    ) -> "RunConfig":
        """Merge defaults, preset, file and flags for ``command``.

        Raises:
            ParameterError: On an unknown command or key, or a value that
                does not parse
        """
        if command not in COMMAND_KEYS:
            raise ParameterError(f"unknown command {command!r}")
        allowed = COMMAND_KEYS[command]
        layers = []
        if preset is not None:
            p = get_preset(preset)
            preset_values = {k: v for k, v in p.values.items() if k in allowed}
            for key in ("tau_q1", "tau_q2"):
                if key in preset_values:
                    preset_values[key] = tau_from_preset(preset_values[key], Convention(p.tau_convention))
            if p.env is not None and "env" in allowed:
                preset_values["env"] = p.env
            layers.append(("preset", preset_values, False))
        layers.append(("config file", file_values or {}, True))
        layers.append(("command line", {k: v for k, v in (cli_values or {}).items() if v is not None}, True))

        defaults = COMMAND_DEFAULTS.get(command, {})
        values = {key: defaults.get(key, KEYS[key][1]) for key in allowed}
        for source, layer, strict in layers:
            for key, raw in layer.items():
                if key not in allowed:
                    if strict:
                        raise ParameterError(f"unknown key {key!r} for {command} (from {source})")
                    continue
                try:
                    values[key] = KEYS[key][0](raw)
                except (TypeError, ValueError) as e:
                    raise ParameterError(f"invalid value for {key} (from {source}): {e}")
        return cls(command, seed, out, preset, values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def agent_config(self) -> AgentConfig:
        return AgentConfig(seed=self.seed, **{k: self.values[k] for k in AGENT_KEYS if k in self.values})

    def resolved_lines(self) -> str:
        lines = [f"command={self.command}", f"seed={self.seed}",
                 f"preset={_format(self.preset)}", f"out={_format(self.out)}"]
        lines += [f"{key}={_format(self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.write_text(self.resolved_lines())
        logger.info(f"wrote resolved config to {path}")
        return path
