#!/usr/bin/env python3

import csv
import io
import json
import os
from typing import List

import pytest
from click.testing import CliRunner
from flexmock import flexmock

from h2tune import Federation
from h2tune import H2TuneInvariantViolation
from h2tune import H2TuneNumericDivergence
from h2tune import __title__
from h2tune import __version__
from h2tune.cli import cli
from h2tune.utils import git_blob_hash

from base import BaseTestcase
from base import RunInfo


def _read_csv(path: str) -> List[List[str]]:
    with open(path, newline="") as f:
        return list(csv.reader(f))


def _read_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _run(run_info: RunInfo, out_dir: str, *args: str) -> None:
    result = CliRunner().invoke(cli, ["run", "--config", run_info.config_path, "--out", out_dir, *args])
    assert result.exit_code == 0, result.output


class TestCLI(BaseTestcase):
    """Tests related to the CLI."""

    def test_help(self) -> None:
        """Test printing the help message."""
        result = CliRunner().invoke(cli, ["--help"])
        assert result.exit_code == 0
        assert result.output.startswith("Usage: ")

        for command in ("run", "compare", "runs", "init", "dump-task"):
            assert command in result.output

    def test_version(self) -> None:
        """Test printing tool version."""
        result = CliRunner().invoke(cli, ["version"])
        assert result.exit_code == 0
        assert result.output == f"{__title__}: {__version__}\n"

    def test_run(self, run_info: RunInfo) -> None:
        """Test running two arms writes metrics, summaries and checkpoints."""
        result = CliRunner().invoke(
            cli,
            [
                "run",
                "--config",
                run_info.config_path,
                "--out",
                run_info.out_dir,
                "--baseline",
                "H2TUNE",
                "--baseline",
                "LOCAL",
            ],
        )
        assert result.exit_code == 0, result.output
        assert "H2TUNE: mean final accuracy" in result.output
        assert "LOCAL: mean final accuracy" in result.output

        with open(run_info.config_path, "rb") as f:
            config_hash = git_blob_hash(f.read())

        summary = _read_json(os.path.join(run_info.out_dir, "summary.json"))
        assert summary["config_hash"] == config_hash
        assert summary["seed"] == 3
        assert sorted(summary["arms"]) == ["H2TUNE", "LOCAL"]

        for arm in ("H2TUNE", "LOCAL"):
            arm_dir = os.path.join(run_info.out_dir, arm)
            rows = _read_csv(os.path.join(arm_dir, "metrics.csv"))
            assert rows[0] == ["t", "k", "share_loss", "specific_loss", "eval_acc", "gg_norm"]
            assert len(rows) == 1 + 2 * 2
            assert [(r[0], r[1]) for r in rows[1:]] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]

            arm_summary = _read_json(os.path.join(arm_dir, "summary.json"))
            assert arm_summary["arm"] == arm
            assert arm_summary["config_hash"] == config_hash
            assert len(arm_summary["final_accuracy"]) == 2
            assert float(rows[-1][4]) == arm_summary["final_accuracy"][1]
            assert os.path.getsize(os.path.join(arm_dir, "checkpoints", "global_R.r2g")) == 13 + 3 * 2 * 2 * 8

    def test_run_zero_rounds(self, run_info: RunInfo) -> None:
        """Test zero rounds only evaluate the untrained models."""
        _run(run_info, run_info.out_dir, "--rounds", "0")

        rows = _read_csv(os.path.join(run_info.out_dir, "H2TUNE", "metrics.csv"))
        summary = _read_json(os.path.join(run_info.out_dir, "H2TUNE", "summary.json"))
        assert len(rows) == 1
        assert summary["rounds"] == 0
        assert summary["final_accuracy"] == summary["initial_accuracy"]
        assert summary["convergence_ratio"] is None

    def test_run_reproducible(self, run_info: RunInfo) -> None:
        """Test rerunning a configuration reproduces metrics and checkpoints bitwise."""
        first = os.path.join(run_info.out_dir, "first")
        second = os.path.join(run_info.out_dir, "second")
        _run(run_info, first)
        _run(run_info, second)

        for name in ("metrics.csv", os.path.join("checkpoints", "global_R.r2g")):
            with open(os.path.join(first, "H2TUNE", name), "rb") as f:
                first_content = f.read()
            with open(os.path.join(second, "H2TUNE", name), "rb") as f:
                assert f.read() == first_content

    def test_run_seed(self, run_info: RunInfo) -> None:
        """Test the seed option changes the run."""
        first = os.path.join(run_info.out_dir, "first")
        second = os.path.join(run_info.out_dir, "second")
        _run(run_info, first)
        _run(run_info, second, "--seed", "4")

        assert _read_json(os.path.join(second, "summary.json"))["seed"] == 4
        assert _read_csv(os.path.join(first, "H2TUNE", "metrics.csv")) != _read_csv(
            os.path.join(second, "H2TUNE", "metrics.csv")
        )

    def test_run_non_empty_output(self, run_info: RunInfo) -> None:
        """Test an existing run is never overwritten."""
        _run(run_info, run_info.out_dir, "--rounds", "0")
        result = CliRunner().invoke(cli, ["run", "-c", run_info.config_path, "--out", run_info.out_dir])
        assert result.exit_code == 2

    def test_run_files_transport(self, run_info: RunInfo) -> None:
        """Test exchanging stacks through files next to the arm results."""
        _run(run_info, run_info.out_dir, "--transport", "files")

        exchange_dir = os.path.join(run_info.out_dir, "H2TUNE", "exchange")
        assert sorted(os.listdir(exchange_dir)) == ["round_1", "round_2"]
        assert sorted(os.listdir(os.path.join(exchange_dir, "round_2"))) == [
            "client_0.r2g",
            "client_1.r2g",
            "global.r2g",
        ]

    def test_run_check_grads(self, run_info: RunInfo) -> None:
        """Test gradients are checked before training."""
        _run(run_info, run_info.out_dir, "--check-grads", "--rounds", "1")

    def test_run_bad_config(self, tmpdir: str) -> None:
        """Test a malformed configuration exits with the configuration error code."""
        config_path = os.path.join(tmpdir, "broken.json")
        with open(config_path, "w") as f:
            f.write("{")

        result = CliRunner().invoke(cli, ["run", "-c", config_path, "--out", os.path.join(tmpdir, "out")])
        assert result.exit_code == 2

    def test_run_missing_config(self, tmpdir: str) -> None:
        """Test a missing configuration exits with the configuration error code."""
        result = CliRunner().invoke(
            cli, ["run", "-c", os.path.join(tmpdir, "missing.json"), "--out", os.path.join(tmpdir, "out")]
        )
        assert result.exit_code == 2

    def test_run_config_from_environment(self, run_info: RunInfo) -> None:
        """Test the configuration path and output directory can come from the environment."""
        result = CliRunner().invoke(
            cli,
            ["run", "--rounds", "0"],
            env={"H2TUNE_CONFIG_PATH": run_info.config_path, "H2TUNE_OUT": run_info.out_dir},
        )
        assert result.exit_code == 0, result.output
        assert os.path.isfile(os.path.join(run_info.out_dir, "summary.json"))

    @pytest.mark.parametrize(
        "exc,exit_code",
        [
            (H2TuneNumericDivergence("Non-finite logits on client 1", term="logits", client_id=1), 3),
            (H2TuneInvariantViolation("Frozen task-shared matrices of client 0 changed"), 4),
            (OSError(28, "No space left on device"), 1),
        ],
    )
    def test_run_exit_codes(self, run_info: RunInfo, exc: Exception, exit_code: int) -> None:
        """Test failures during training map to documented exit codes."""
        flexmock(Federation).should_receive("run").and_raise(exc)

        result = CliRunner().invoke(cli, ["run", "-c", run_info.config_path, "--out", run_info.out_dir])
        assert result.exit_code == exit_code

    def test_compare(self, run_info: RunInfo) -> None:
        """Test comparing two runs of the same configuration."""
        first = os.path.join(run_info.out_dir, "first")
        second = os.path.join(run_info.out_dir, "second")
        _run(run_info, first)
        _run(run_info, second)

        result = CliRunner().invoke(
            cli, ["compare", os.path.join(first, "H2TUNE"), os.path.join(second, "H2TUNE")]
        )
        assert result.exit_code == 0, result.output

        rows = list(csv.reader(io.StringIO(result.output)))
        assert rows[0] == ["client", "acc_H2TUNE", "acc_H2TUNE", "delta_H2TUNE"]
        assert [r[0] for r in rows[1:]] == ["0", "1", "mean"]
        assert all(float(r[3]) == 0.0 for r in rows[1:])

    def test_compare_table(self, run_info: RunInfo) -> None:
        """Test comparing arms printed as a table."""
        _run(run_info, run_info.out_dir, "--baseline", "H2TUNE", "--baseline", "NO_MASK")

        result = CliRunner().invoke(
            cli,
            [
                "compare",
                "--format",
                "table",
                os.path.join(run_info.out_dir, "H2TUNE"),
                os.path.join(run_info.out_dir, "NO_MASK"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "delta_NO_MASK" in result.output

    def test_compare_different_configs(self, run_info: RunInfo) -> None:
        """Test runs of different configurations are not compared."""
        first = os.path.join(run_info.out_dir, "first")
        second = os.path.join(run_info.out_dir, "second")
        _run(run_info, first, "--rounds", "0")
        _run(run_info, second, "--rounds", "0")

        summary_path = os.path.join(second, "H2TUNE", "summary.json")
        summary = _read_json(summary_path)
        summary["config_hash"] = "0" * 40
        with open(summary_path, "w") as f:
            json.dump(summary, f)

        result = CliRunner().invoke(
            cli, ["compare", os.path.join(first, "H2TUNE"), os.path.join(second, "H2TUNE")]
        )
        assert result.exit_code == 2

    def test_compare_single_directory(self, run_info: RunInfo) -> None:
        """Test a comparison needs at least two directories."""
        _run(run_info, run_info.out_dir, "--rounds", "0")

        result = CliRunner().invoke(cli, ["compare", os.path.join(run_info.out_dir, "H2TUNE")])
        assert result.exit_code == 2

    def test_compare_run_directories(self, run_info: RunInfo) -> None:
        """Test run directories holding several arms are refused in favour of their arm directories."""
        first = os.path.join(run_info.out_dir, "first")
        second = os.path.join(run_info.out_dir, "second")
        _run(run_info, first, "--rounds", "0", "--baseline", "H2TUNE", "--baseline", "LOCAL")
        _run(run_info, second, "--rounds", "0")

        result = CliRunner().invoke(cli, ["compare", first, second])
        assert result.exit_code == 2
        assert not isinstance(result.exception, KeyError)

    def test_compare_incomplete_summary(self, run_info: RunInfo) -> None:
        """Test an arm summary without final accuracies is a configuration error."""
        first = os.path.join(run_info.out_dir, "first")
        second = os.path.join(run_info.out_dir, "second")
        _run(run_info, first, "--rounds", "0")
        _run(run_info, second, "--rounds", "0")

        summary_path = os.path.join(second, "H2TUNE", "summary.json")
        summary = _read_json(summary_path)
        del summary["final_accuracy"]
        with open(summary_path, "w") as f:
            json.dump(summary, f)

        result = CliRunner().invoke(
            cli, ["compare", os.path.join(first, "H2TUNE"), os.path.join(second, "H2TUNE")]
        )
        assert result.exit_code == 2

    def test_runs(self, run_info: RunInfo) -> None:
        """Test listing runs as JSON, newest first."""
        _run(run_info, os.path.join(run_info.out_dir, "older"), "--rounds", "0")
        _run(run_info, os.path.join(run_info.out_dir, "newer"), "--rounds", "0", "--baseline", "LOCAL")

        result = CliRunner().invoke(cli, ["runs", run_info.out_dir, "--format", "json"])
        assert result.exit_code == 0, result.output

        entries = json.loads(result.output)
        assert [e["id"] for e in entries] == ["newer", "older"]
        assert entries[0]["arms"] == ["LOCAL"]
        assert entries[1]["arms"] == ["H2TUNE"]

    def test_runs_table(self, run_info: RunInfo) -> None:
        """Test listing runs as a table."""
        _run(run_info, os.path.join(run_info.out_dir, "only"), "--rounds", "0")

        result = CliRunner().invoke(cli, ["runs", run_info.out_dir])
        assert result.exit_code == 0
        assert "only" in result.output

    def test_runs_missing_root(self, tmpdir: str) -> None:
        """Test listing a missing directory gives no runs."""
        result = CliRunner().invoke(cli, ["runs", os.path.join(tmpdir, "nothing"), "--format", "json"])
        assert result.exit_code == 0
        assert json.loads(result.output) == []

    def test_init(self, tmpdir: str) -> None:
        """Test initializing a configuration file."""
        config_path = os.path.join(tmpdir, "h2tune.json")

        result = CliRunner().invoke(cli, ["init", "--config", config_path])
        assert result.exit_code == 0
        assert "h2tune.json" in os.listdir(tmpdir)

        result = CliRunner().invoke(cli, ["init", "--config", config_path])
        assert result.exit_code == 1

    def test_dump_task(self, run_info: RunInfo) -> None:
        """Test dumping a client dataset as CSV."""
        result = CliRunner().invoke(cli, ["dump-task", "-c", run_info.config_path, "--client", "1"])
        assert result.exit_code == 0, result.output

        rows = list(csv.reader(io.StringIO(result.output)))
        assert rows[0] == ["split", "label", "x0", "x1", "x2", "x3"]
        assert len(rows) == 1 + 32 + 24
        assert sum(r[0] == "test" for r in rows[1:]) == 24
        assert {r[1] for r in rows[1:]} <= {"0", "1", "2"}

    def test_dump_task_unknown_client(self, run_info: RunInfo) -> None:
        """Test dumping a client which is not part of the federation."""
        result = CliRunner().invoke(cli, ["dump-task", "-c", run_info.config_path, "--client", "5"])
        assert result.exit_code == 2
