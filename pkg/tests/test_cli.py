import json

import pytest

from underq import __version__
from underq.cli import build_parser, main
from underq.finite_mdp import load_dataset

TRAIN_CONFIG = """\
# tiny run
n_epochs=2
iters_per_epoch=3
batch_size=16
hidden=8,8
eval_interval_epochs=1
eval_episodes=2
"""


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def last_stdout_record(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture
def out(tmp_path):
    return tmp_path / "run"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A dataset and a tiny trained agent shared by the checkpoint commands."""
    root = tmp_path_factory.mktemp("trained")
    config = root / "train.cfg"
    config.write_text(TRAIN_CONFIG)
    assert main(["gen-dataset", "--out", str(root), "--episodes", "10"]) == 0
    assert main(["train", "--out", str(root), "--dataset", str(root / "dataset.txt"),
                 "--config", str(config), "--gamma", "0.9"]) == 0
    return root


class TestParser:
    """Argument parsing."""

    def test_version(self, capsys):
        """--version prints the package version."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["--version"])
        assert __version__ in capsys.readouterr().out

    def test_command_required(self):
        """A subcommand is mandatory."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestAnalysisCommands:
    """The theory and tabular commands."""

    def test_error_curve(self, out, capsys):
        """Writes the sampled curve, the resolved config and a sidecar log."""
        assert main(["error-curve", "--out", str(out), "--gamma", "0.9", "--max-x", "40"]) == 0
        records = read_jsonl(out / "error_curve.jsonl")
        assert records[0] == {"schema": "underq.error_curve", "fields": ["x", "f"]}
        assert len(records) == 42
        summary = last_stdout_record(capsys)
        assert summary["peak_index"] in (9, 10)
        assert (out / "config.resolved").exists()
        assert out.with_name("run.log").exists()

    def test_error_curve_without_discounting(self, out, capsys):
        """gamma = 1 still tabulates the curve but reports no maximizer."""
        assert main(["error-curve", "--out", str(out), "--gamma", "1.0", "--max-x", "5"]) == 0
        assert "argmax" not in last_stdout_record(capsys)

    def test_simulate_error(self, out):
        """Every step is within three standard errors, consistent, and drawn from its own seed."""
        assert main(["simulate-error", "--out", str(out), "--horizon", "3", "--samples", "10000",
                     "--beta", "1.0", "--gamma", "0.9"]) == 0
        rows = read_jsonl(out / "simulate_error.jsonl")[1:]
        assert [r["t"] for r in rows] == [1, 2, 3]
        assert all(r["within_3se"] for r in rows)
        assert all(r["thm3_residual"] < 1e-9 for r in rows)
        assert len({r["seed"] for r in rows}) == 3

    def test_verify_contraction(self, out, capsys):
        """The scaling reading passes on random MDPs."""
        assert main(["verify-contraction", "--out", str(out), "--mdps", "2", "--pairs", "5",
                     "--iota", "0.8", "--states", "4", "--actions", "2"]) == 0
        assert len(read_jsonl(out / "contraction.jsonl")) == 3
        summary = last_stdout_record(capsys)
        assert summary["passed"] is True
        assert summary["bound"] == pytest.approx(0.72)

    def test_fixed_point(self, out):
        """Writes the fixed point next to Q* and the residual trace."""
        assert main(["fixed-point", "--out", str(out), "--states", "3", "--actions", "2", "--iota", "0.5"]) == 0
        rows = read_jsonl(out / "fixed_point.jsonl")[1:]
        assert len(rows) == 6
        assert all(r["q"] <= r["q_star"] + 1e-9 for r in rows)
        assert len(read_jsonl(out / "fixed_point_residuals.jsonl")) > 1

    def test_fixed_point_budget(self, out, capsys):
        """An exhausted iteration budget exits with the numerical failure code."""
        assert main(["fixed-point", "--out", str(out), "--max-iters", "2"]) == 3
        assert "underq: error:" in capsys.readouterr().err


class TestValidation:
    """Invalid input exits with code 2."""

    def test_discount_above_one(self, out, capsys):
        """gamma > 1 is rejected before any work happens."""
        assert main(["simulate-error", "--out", str(out), "--gamma", "1.01"]) == 2
        assert "discount" in capsys.readouterr().err

    def test_training_discount_above_one(self, out):
        """The agent refuses gamma > 1 too."""
        assert main(["train", "--out", str(out), "--gamma", "1.01"]) == 2

    def test_iota_zero(self, out):
        """iota = 0 is a domain error."""
        assert main(["fixed-point", "--out", str(out), "--iota", "0"]) == 2

    def test_unknown_config_key(self, out, tmp_path):
        """A config file key outside the command's schema is refused."""
        config = tmp_path / "bad.cfg"
        config.write_text("horizon=3\n")
        assert main(["error-curve", "--out", str(out), "--config", str(config)]) == 2

    def test_missing_checkpoint(self, out):
        """Evaluating without a checkpoint fails cleanly."""
        assert main(["eval", "--out", str(out), "--checkpoint", str(out / "absent.ckpt")]) == 2

    def test_unknown_preset(self, out):
        """Unknown presets are refused."""
        assert main(["train", "--out", str(out), "--preset", "nope"]) == 2


class TestOfflinePipeline:
    """Dataset generation, training, evaluation and probing end to end."""

    def test_gen_dataset_is_deterministic(self, tmp_path):
        """Two runs with the same seed write identical datasets."""
        for name in ("a", "b"):
            assert main(["gen-dataset", "--out", str(tmp_path / name), "--episodes", "4", "--seed", "3"]) == 0
        assert (tmp_path / "a" / "dataset.txt").read_bytes() == (tmp_path / "b" / "dataset.txt").read_bytes()
        assert len(load_dataset(tmp_path / "a" / "dataset.txt")) == 80

    def test_train_outputs(self, trained):
        """Training writes metrics, per-evaluation checkpoints and the selected best."""
        metrics = read_jsonl(trained / "metrics.jsonl")
        assert metrics[0]["schema"] == "underq.metrics"
        assert [m["epoch"] for m in metrics[1:]] == [1, 2]
        assert (trained / "best.ckpt").exists()
        assert (trained / "epoch_00002.ckpt").exists()
        assert "n_epochs=2" in (trained / "config.resolved").read_text()

    def test_eval(self, trained, tmp_path, capsys):
        """A checkpoint evaluates to a finite normalized score."""
        assert main(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(trained / "best.ckpt"),
                     "--episodes", "3"]) == 0
        record = last_stdout_record(capsys)
        assert record["normalized_score"] == record["normalized_score"]

    def test_eval_wrong_env(self, trained, tmp_path):
        """A push checkpoint does not fit the reach task."""
        assert main(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(trained / "best.ckpt"),
                     "--env", "reach"]) == 2

    def test_probe(self, trained, tmp_path):
        """The probe reports the critic value, the Monte-Carlo return and their gap."""
        assert main(["probe-overestimation", "--out", str(tmp_path / "p"), "--checkpoint",
                     str(trained / "best.ckpt"), "--dataset", str(trained / "dataset.txt"),
                     "--gamma", "0.9", "--probe-states", "16"]) == 0
        record = read_jsonl(tmp_path / "p" / "probe.jsonl")[1]
        assert record["gap"] == pytest.approx(record["mean_q_estimate"] - record["mc_return_estimate"])
