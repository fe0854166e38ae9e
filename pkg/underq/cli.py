"""
Command-line entry point: ``underq <command> [options]``.

Every command writes its primary output under ``--out`` as line-delimited
JSON records with a schema header, plus ``config.resolved``. Timestamps go
only to the sidecar log ``<out>.log``. Exit codes: 0 success, 2 invalid
input, 3 failed numerical check.
"""

import argparse
import logging
import sys
from dataclasses import replace
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .agent import (EvalReport, METRIC_FIELDS, critics_from_checkpoint, evaluate, min_critic_values,
                    overestimation_probe, policy_fn, policy_from_checkpoint, train)
from .approx import load_checkpoint
from .config import RunConfig, read_config_file
from .envs import check_compatible, generate_dataset, make_env
from .error import EXIT_OK, NumericalCheckError, ParameterError, UnderqError
from .finite_mdp import OfflineDataset, load_dataset, random_mdp, save_dataset
from .gumbel_analysis import (NestedChainSpec, error_curve_argmax, error_curve_table, simulate_nested_error,
                              theorem1_bound, theorem2_bound, theorem3_consistency)
from .helpers import RecordWriter, json_encode, spawn_seeds
from .operators import (ContractionReport, UnderestimateConfig, fixed_point, value_iteration,
                        verify_contraction)

logger = getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

SIMULATE_FIELDS = ("t", "seed", "horizon", "gamma", "beta", "target", "closed_form_thm1", "closed_form_thm2",
                   "mc_bias", "mc_se", "within_3se", "thm3_residual")
CONTRACTION_FIELDS = ("mdp", "interpretation", "iota", "gamma", "pairs_tested", "max_ratio",
                      "constant_shift_ratio", "bound", "passed")


def _seed_of(stream: np.random.SeedSequence) -> int:
    return int(stream.generate_state(1)[0])


def _open_records(run: RunConfig, name: str, schema: str, fields) -> RecordWriter:
    path = Path(run.out) / name
    return RecordWriter(path.open("w"), schema, fields)


def _emit(record: Dict) -> None:
    print(json_encode(record))


def cmd_simulate_error(run: RunConfig) -> int:
    horizon, gamma, beta = run["horizon"], run["gamma"], run["terminal_scale"]
    spec = NestedChainSpec(horizon, beta, gamma, actions_per_state=run["actions"],
                           mc_samples=run["mc_samples"], seed=run.seed)
    writer = _open_records(run, "simulate_error.jsonl", "underq.simulate_error", SIMULATE_FIELDS)
    with writer.stream:
        for t, stream in enumerate(spawn_seeds(run.seed, horizon), start=1):
            row_spec = replace(spec, seed=_seed_of(stream))
            estimate = simulate_nested_error(row_spec, t, run["target"], run["mode"])
            thm1 = theorem1_bound(horizon, t, gamma, beta)
            thm2 = theorem2_bound(horizon, t, gamma, beta)
            reference = thm1 if run["target"] == "q" else thm2
            writer.write({
                "t": t, "seed": row_spec.seed, "horizon": horizon, "gamma": gamma, "beta": beta, "target": run["target"],
                "closed_form_thm1": thm1, "closed_form_thm2": thm2,
                "mc_bias": estimate.estimated_error, "mc_se": estimate.standard_error,
                "within_3se": abs(estimate.estimated_error - reference) <= 3 * estimate.standard_error,
                "thm3_residual": theorem3_consistency(spec, t),
            })
    _emit({"command": run.command, "rows": writer.count})
    return EXIT_OK


def cmd_error_curve(run: RunConfig) -> int:
    table = error_curve_table(run["gamma"], run["coefficient"], run["offset"], run["max_x"])
    writer = _open_records(run, "error_curve.jsonl", "underq.error_curve", ("x", "f"))
    with writer.stream:
        writer.write_all({"x": x, "f": float(f)} for x, f in enumerate(table))
    summary = {"command": run.command, "peak_index": int(np.argmax(table))}
    if run["gamma"] < 1:
        summary["argmax"] = error_curve_argmax(run["gamma"])
    _emit(summary)
    return EXIT_OK


def _operator_config(run: RunConfig) -> UnderestimateConfig:
    return UnderestimateConfig(iota=run["iota"], interpretation=run["interpretation"],
                               noise_scale=run["noise_scale"], tau=run["tau"],
                               n_noise=run["n_noise"], seed=run.seed)


def cmd_verify_contraction(run: RunConfig) -> int:
    cfg = _operator_config(run)
    if run["pairs"] < 1 or run["mdps"] < 1:
        raise ParameterError(f"pairs and mdps must be >= 1, got {run['pairs']} and {run['mdps']}")
    reports: List[ContractionReport] = []
    writer = _open_records(run, "contraction.jsonl", "underq.contraction", CONTRACTION_FIELDS)
    with writer.stream:
        for i, stream in enumerate(spawn_seeds(run.seed, run["mdps"])):
            mdp_seed, pair_seed = (_seed_of(s) for s in stream.spawn(2))
            mdp = random_mdp(run["n_states"], run["n_actions"], mdp_seed, discount=run["gamma"])
            report = verify_contraction(mdp, cfg, run["pairs"], run["q_range"], pair_seed)
            reports.append(report)
            writer.write({"mdp": i, **report.as_record()})
    worst = max(reports, key=lambda r: r.max_ratio)
    summary = ContractionReport(
        interpretation=worst.interpretation, iota=worst.iota, gamma=worst.gamma,
        pairs_tested=sum(r.pairs_tested for r in reports), max_ratio=worst.max_ratio,
        constant_shift_ratio=max(r.constant_shift_ratio for r in reports),
        bound=worst.bound, passed=all(r.passed for r in reports))
    _emit(summary.as_record())
    if not summary.passed:
        raise NumericalCheckError(
            f"observed modulus {summary.max_ratio!r} exceeds bound {summary.bound!r}")
    return EXIT_OK


def cmd_fixed_point(run: RunConfig) -> int:
    cfg = _operator_config(run)
    mdp = random_mdp(run["n_states"], run["n_actions"], run.seed, discount=run["gamma"])
    result = fixed_point(mdp, cfg, run["tol"], run["max_iters"])
    optimal = value_iteration(mdp, run["tol"])
    writer = _open_records(run, "fixed_point.jsonl", "underq.fixed_point", ("state", "action", "q", "q_star"))
    with writer.stream:
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                writer.write({"state": s, "action": a, "q": result.q[s, a], "q_star": optimal[s, a]})
    residuals = _open_records(run, "fixed_point_residuals.jsonl", "underq.residuals", ("iteration", "residual"))
    with residuals.stream:
        residuals.write_all({"iteration": i, "residual": r} for i, r in enumerate(result.residuals, start=1))
    _emit({"command": run.command, "iterations": result.iterations, "final_residual": result.final_residual,
           "max_gap": float(np.max(optimal - result.q))})
    return EXIT_OK


def _dataset_for(run: RunConfig, env) -> OfflineDataset:
    if run.values.get("dataset"):
        dataset = load_dataset(run["dataset"])
        check_compatible(env, dataset)
        return dataset
    return generate_dataset(env, run["episodes"], run["expert_fraction"], run.seed, run["expert_noise"])


def cmd_gen_dataset(run: RunConfig) -> int:
    env = make_env(run["env"])
    dataset = _dataset_for(run, env)
    save_dataset(dataset, Path(run.out) / "dataset.txt")
    _emit({"command": run.command, "records": len(dataset), **env.describe()})
    return EXIT_OK


def cmd_train(run: RunConfig) -> int:
    env = make_env(run["env"])
    cfg = run.agent_config()
    dataset = _dataset_for(run, env)
    writer = _open_records(run, "metrics.jsonl", "underq.metrics", METRIC_FIELDS)
    with writer.stream:
        result = train(dataset, env, cfg, Path(run.out), writer)
    best = result.best_report
    _emit({"command": run.command, "best_epoch": best.epoch, "best_score": best.normalized_score,
           "evaluations": len(result.reports)})
    return EXIT_OK


def _report_record(report: EvalReport) -> Dict:
    return {"epoch": report.epoch, "mean_return": report.mean_return,
            "normalized_score": report.normalized_score, "mean_q_estimate": report.mean_q_estimate,
            "selected_best": report.selected_best}


def cmd_eval(run: RunConfig) -> int:
    checkpoint = load_checkpoint(run["checkpoint"] or Path(run.out) / "best.ckpt")
    actor, schedule = policy_from_checkpoint(checkpoint.params, checkpoint.meta)
    env = make_env(run["env"])
    if (actor.state_dim, actor.action_dim) != (env.state_dim, env.action_dim):
        raise ParameterError(f"checkpoint does not fit environment {env.name}")
    report = evaluate(actor, schedule, env, run["episodes"], run.seed)
    record = _report_record(report)
    writer = _open_records(run, "eval.jsonl", "underq.eval", tuple(record))
    with writer.stream:
        writer.write(record)
    _emit(record)
    return EXIT_OK


def cmd_probe_overestimation(run: RunConfig) -> int:
    checkpoint = load_checkpoint(run["checkpoint"] or Path(run.out) / "best.ckpt")
    actor, schedule = policy_from_checkpoint(checkpoint.params, checkpoint.meta)
    critics = critics_from_checkpoint(checkpoint.params)
    env = make_env(run["env"])
    dataset = load_dataset(run["dataset"]) if run["dataset"] else generate_dataset(env, 50, 0.5, run.seed)
    result = overestimation_probe(lambda s, a: min_critic_values(critics, s, a), policy_fn(actor, schedule),
                                  dataset, env, run["gamma"], run["probe_states"], run.seed)
    record = {"mean_q_estimate": result.mean_q_estimate, "mc_return_estimate": result.mc_return_estimate,
              "gap": result.gap, "standard_error": result.standard_error}
    writer = _open_records(run, "probe.jsonl", "underq.probe", tuple(record))
    with writer.stream:
        writer.write(record)
    _emit(record)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "simulate-error": cmd_simulate_error,
    "error-curve": cmd_error_curve,
    "verify-contraction": cmd_verify_contraction,
    "fixed-point": cmd_fixed_point,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe-overestimation": cmd_probe_overestimation,
}


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--preset", default=None, help="named hyperparameter preset")
    common.add_argument("--config", default=None, help="flat key=value config file")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    return common


def _operator_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iota", type=float)
    p.add_argument("--interp", dest="interpretation", choices=["scaling", "quantile", "expectile"])
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--n-noise", dest="n_noise", type=int)
    p.add_argument("--states", dest="n_states", type=int)
    p.add_argument("--actions", dest="n_actions", type=int)
    p.add_argument("--gamma", type=float)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env")
    p.add_argument("--episodes", type=int)
    p.add_argument("--expert-fraction", dest="expert_fraction", type=float)
    p.add_argument("--expert-noise", dest="expert_noise", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="underq", description="Overestimation and underestimated-backup laboratory.")
    parser.add_argument("--version", action="version", version=f"underq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()

    p = sub.add_parser("simulate-error", parents=[common], help="Monte-Carlo check of the nested error bounds")
    p.add_argument("--horizon", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", dest="terminal_scale", type=float)
    p.add_argument("--actions", type=int)
    p.add_argument("--samples", dest="mc_samples", type=int)
    p.add_argument("--target", choices=["q", "v"])
    p.add_argument("--mode", choices=["analytic", "least_squares"])

    p = sub.add_parser("error-curve", parents=[common], help="sample the overestimation error curve")
    p.add_argument("--gamma", type=float)
    p.add_argument("--coefficient", type=float)
    p.add_argument("--offset", type=int, choices=[1, 2])
    p.add_argument("--max-x", dest="max_x", type=int)

    p = sub.add_parser("verify-contraction", parents=[common], help="measure the operator's sup-norm modulus")
    _operator_flags(p)
    p.add_argument("--pairs", type=int)
    p.add_argument("--mdps", type=int)
    p.add_argument("--q-range", dest="q_range", type=float)

    p = sub.add_parser("fixed-point", parents=[common], help="iterate the operator to its fixed point")
    _operator_flags(p)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)

    p = sub.add_parser("gen-dataset", parents=[common], help="generate a mixed-quality offline dataset")
    _data_flags(p)

    p = sub.add_parser("train", parents=[common], help="train the agent on an offline dataset")
    _data_flags(p)
    p.add_argument("--dataset")
    p.add_argument("--epochs", dest="n_epochs", type=int)
    p.add_argument("--iters-per-epoch", dest="iters_per_epoch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau-q1", dest="tau_q1", type=float, help="over-prediction weight of critic 1")
    p.add_argument("--tau-q2", dest="tau_q2", type=float, help="over-prediction weight of critic 2")
    p.add_argument("--eta", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--gamma", type=float)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--env")
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("probe-overestimation", parents=[common], help="critic value vs Monte-Carlo return")
    p.add_argument("--env")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--gamma", type=float)
    p.add_argument("--probe-states", dest="probe_states", type=int)
    return parser


_GLOBAL_FLAGS = ("command", "seed", "out", "preset", "config", "verbose")


def _configure_logging(out: str, verbose: bool) -> List[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    sidecar = logging.FileHandler(str(Path(out)) + ".log", mode="w")
    sidecar.setLevel(logging.DEBUG if verbose else logging.INFO)
    sidecar.setFormatter(logging.Formatter(LOG_FORMAT))
    handlers: List[logging.Handler] = [console, sidecar]
    for handler in handlers:
        root.addHandler(handler)
    return handlers


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    handlers = _configure_logging(args.out, args.verbose)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cli_values = {k: v for k, v in vars(args).items() if k not in _GLOBAL_FLAGS}
        run = RunConfig.resolve(args.command, args.seed, args.out, args.preset, file_values, cli_values)
        run.write_resolved(args.out)
        logger.info(f"running {args.command} with seed {args.seed}")
        return COMMANDS[args.command](run)
    except UnderqError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        print(f"underq: error: {e.message}", file=sys.stderr)
        return e.exit_code
    finally:
        root = logging.getLogger()
        for handler in handlers:
            root.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
