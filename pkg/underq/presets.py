"""
Named hyperparameter presets.

The benchmark rows are kept as tabulated, with expectile levels in the
underestimate (IQL) reading; ``AgentConfig.from_preset`` converts them.
Their environments are not shipped, so only the desk presets can be
trained end to end.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional

from .error import ParameterError


@dataclass(frozen=True)
class Preset:
    name: str
    values: Dict[str, Any]
    env: Optional[str] = None
    tau_convention: str = "underestimate_iql"
    notes: str = ""


def _benchmark(name, tau_q1, tau_q2, lr, eta, zeta, grad_norm, epochs, max_q_backup):
    return Preset(name, {
        "tau_q1": tau_q1, "tau_q2": tau_q2, "lr": lr, "eta": eta, "zeta": zeta,
        "grad_norm": grad_norm, "n_epochs": epochs, "iters_per_epoch": 1000,
        "max_q_backup": max_q_backup, "batch_size": 256, "hidden": (256, 256, 256),
        "eval_interval_epochs": 50,
    })


_BENCHMARK_ROWS = [
    ("halfcheetah-medium-v2", 0.1, 0.2, 3e-4, 1.0, 0.005, 100.0, 2000, False),
    ("hopper-medium-v2", 0.1, 0.2, 3e-4, 1.0, 0.5, 100.0, 2000, False),
    ("walker2d-medium-v2", 0.1, 0.2, 3e-4, 1.0, 0.2, 100.0, 2000, False),
    ("halfcheetah-medium-replay-v2", 0.1, 0.2, 3e-4, 1.0, 0.005, 2.0, 2000, False),
    ("hopper-medium-replay-v2", 0.1, 0.2, 3e-4, 1.0, 0.1, 10.0, 2000, False),
    ("walker2d-medium-replay-v2", 0.1, 0.2, 3e-4, 1.0, 0.1, 4.0, 2000, False),
    ("halfcheetah-medium-expert-v2", 0.1, 0.2, 3e-4, 1.0, 1.0, 7.0, 2000, False),
    ("hopper-medium-expert-v2", 0.1, 0.2, 3e-4, 1.0, 1.0, 100.0, 2000, False),
    ("walker2d-medium-expert-v2", 0.1, 0.2, 3e-4, 1.0, 1.0, 5.0, 2000, False),
    ("antmaze-umaze-v0", 0.2, 0.3, 3e-4, 0.5, 1.0, 10.0, 1000, True),
    ("antmaze-umaze-diverse-v0", 0.2, 0.3, 3e-4, 2.0, 1.0, 3.0, 1000, True),
    ("pen-human-v1", 0.2, 0.3, 6e-5, 0.1, 1.0, 50.0, 1000, True),
    # gn 0 means no clipping
    ("pen-cloned-v1", 0.2, 0.3, 3e-5, 0.01, 1.0, 0.0, 1000, True),
    ("kitchen-complete-v0", 0.2, 0.3, 3e-4, 0.005, 1.0, 9.0, 1000, False),
    ("kitchen-partial-v0", 0.2, 0.3, 3e-4, 0.005, 1.0, 100.0, 1000, False),
    ("kitchen-mixed-v0", 0.2, 0.3, 3e-4, 0.005, 1.0, 100.0, 1000, False),
]

_DESK_DEFAULTS = {
    "lr": 1e-3, "eta": 1.0, "zeta": 1.0, "grad_norm": 10.0, "n_epochs": 30,
    "iters_per_epoch": 100, "batch_size": 128, "max_q_backup": False,
    "hidden": (64, 64), "gamma": 0.9, "rho": 0.995, "eval_interval_epochs": 3,
    "eval_episodes": 20,
}


def _desk(name, env, notes, **values):
    return Preset(name, {**_DESK_DEFAULTS, **values}, env=env, notes=notes)


_DESK_PRESETS = [
    _desk("push-desk", "push", "1-D push, underestimating critics",
          tau_q1=0.1, tau_q2=0.2),
    _desk("push-desk-mse", "push", "1-D push, mean-squared TD baseline",
          tau_q1=0.5, tau_q2=0.5),
    _desk("push-noisy-desk", "push-noisy", "noisy-reward push for the overestimation probe",
          tau_q1=0.1, tau_q2=0.2),
    _desk("push-noisy-desk-mse", "push-noisy", "noisy-reward push, mean-squared TD baseline",
          tau_q1=0.5, tau_q2=0.5),
    _desk("reach-desk", "reach", "2-D reach",
          tau_q1=0.1, tau_q2=0.2),
    _desk("tabular-desk", "tabular", "2-state MDP behind one-hot states",
          tau_q1=0.5, tau_q2=0.5, n_epochs=20, eval_interval_epochs=10),
]

PRESETS: Dict[str, Preset] = {p.name: p for p in
                              [_benchmark(*row) for row in _BENCHMARK_ROWS] + _DESK_PRESETS}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
