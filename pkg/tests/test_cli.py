"""CLI tests through typer's runner."""

import json

import pandas as pd
import pytest
from typer.testing import CliRunner

from cpudse.main import app, run
from cpudse.modules.design_space import default_space, parse_design_space, subsystem_subset
from cpudse.modules.report import SUMMARY_FILE

from tests.conftest import TOY_PARAMS

runner = CliRunner()
TOY = ",".join(TOY_PARAMS)


@pytest.fixture(scope="module")
def trace_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("traces")
    result = runner.invoke(app, ["gen-traces", "--out", str(out), "--workloads", "compute,memory",
                                 "--instructions", "256"])
    assert result.exit_code == 0, result.output
    return out


def test_gen_traces_writes_traces_and_manifest(trace_dir):
    assert sorted(p.name for p in trace_dir.glob("*.trace")) == ["compute.trace", "memory.trace"]
    assert (trace_dir / "compute.profile").exists()
    manifest = json.loads((trace_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-traces"
    assert manifest["seeds"] == {"seed": 0}


def test_unknown_workload_exits_1(tmp_path):
    result = runner.invoke(app, ["gen-traces", "--out", str(tmp_path), "--workloads", "nope"])
    assert result.exit_code == 1


def test_dump_space_text_lists_catalog():
    result = runner.invoke(app, ["dump-space", "--text"])
    assert result.exit_code == 0
    assert parse_design_space(result.stdout) == default_space()


def test_dump_space_table_and_subsystem():
    result = runner.invoke(app, ["dump-space"])
    assert result.exit_code == 0
    assert "68 parameters" in result.stdout
    result = runner.invoke(app, ["dump-space", "--subsystem", "dmem", "--text"])
    assert parse_design_space(result.stdout) == subsystem_subset(default_space(), "dmem")


def test_simulate_prints_counters(trace_dir, tmp_path):
    result = runner.invoke(app, ["simulate", "--traces", str(trace_dir / "compute.trace"), "--out", str(tmp_path),
                                 "--params", TOY, "--ranks", "1,5,3", "--chunk-len", "64", "--chunks", "2"])
    assert result.exit_code == 0, result.output
    assert "instructions=128" in result.stdout.splitlines()
    assert len(pd.read_csv(tmp_path / "stats.csv")) == 2


def test_simulate_bad_ranks_exit_1(trace_dir, tmp_path):
    result = runner.invoke(app, ["simulate", "--traces", str(trace_dir), "--out", str(tmp_path),
                                 "--params", TOY, "--ranks", "9,9,9"])
    assert result.exit_code == 1


def test_missing_trace_exits_1(tmp_path):
    result = runner.invoke(app, ["simulate", "--traces", str(tmp_path / "none.trace"), "--out", str(tmp_path)])
    assert result.exit_code == 1


def test_exhaustive_search_on_tiny_space(trace_dir, tmp_path):
    result = runner.invoke(app, ["search-exhaustive", "--traces", str(trace_dir), "--out", str(tmp_path),
                                 "--params", "icache associativity", "--chunk-len", "64", "--eval-chunks", "1"])
    assert result.exit_code == 0, result.output
    fitness, ranks = result.stdout.strip().splitlines()[-1].split()
    assert float(fitness) > 0
    assert len(pd.read_csv(tmp_path / "best_config.csv")) == 1
    assert json.loads((tmp_path / "search_result.json").read_text())["calls"] == 4


def test_exhaustive_search_refuses_full_catalog(trace_dir, tmp_path):
    result = runner.invoke(app, ["search-exhaustive", "--traces", str(trace_dir), "--out", str(tmp_path),
                                 "--chunk-len", "64", "--eval-chunks", "1"])
    assert result.exit_code == 1


def test_report_on_empty_directory_exits_1(tmp_path):
    assert runner.invoke(app, ["report", str(tmp_path)]).exit_code == 1


def test_run_returns_exit_codes():
    assert run(["no-such-command"]) == 2
    assert run(["dump-space", "--text"]) == 0


@pytest.mark.slow
def test_end_to_end_pipeline(trace_dir, tmp_path):
    def ok(*args):
        result = runner.invoke(app, [str(a) for a in args])
        assert result.exit_code == 0, result.output
        return result

    data = tmp_path / "data"
    ok("build-dataset", "--traces", trace_dir, "--out", data, "--params", TOY, "--configs", "4",
       "--chunk-len", "32", "--chunks", "2", "--seed", "1")
    dataset = data / "dataset.csv"
    assert len(pd.read_csv(dataset)) == 16

    ok("train-p", "--dataset", dataset, "--out", tmp_path / "train-p", "--epochs", "1", "--baseline")
    assert (tmp_path / "train-p" / "baseline.ckpt").exists()
    ok("train-m", "--dataset", dataset, "--out", tmp_path / "train-m", "--epochs", "1")

    ok("predict", "--checkpoint", tmp_path / "train-p" / "model.ckpt", "--dataset", dataset,
       "--out", tmp_path / "predict-p")
    assert (tmp_path / "predict-p" / "workload_predictions.csv").exists()
    ok("predict", "--checkpoint", tmp_path / "train-m" / "model.ckpt", "--dataset", dataset,
       "--out", tmp_path / "predict-m", "--target", "0.5")
    assert len(pd.read_csv(tmp_path / "predict-m" / "predicted_config.csv")) == 3

    ok("mast", "--checkpoint", tmp_path / "train-m" / "model.ckpt", "--dataset", dataset,
       "--out", tmp_path / "mast", "--no-oracle", "--patience", "3", "--max-iter", "50")
    assert (tmp_path / "mast" / "trajectory.csv").exists()

    ok("search-ga", "--dataset", dataset, "--out", tmp_path / "search-ga", "--params", TOY,
       "--population", "4", "--iterations", "2", "--eval-chunks", "1")
    ok("smart-finetune", "--dataset", dataset, "--out", tmp_path / "smart", "--pretrain-epochs", "1",
       "--batch-size", "8", "--eval-chunks", "1")
    assert (tmp_path / "smart" / "ensemble" / "ensemble.json").exists()

    ok("report", tmp_path)
    assert (tmp_path / "report" / SUMMARY_FILE).exists()
    assert (tmp_path / "report" / "convergence.csv").exists()
