"""Tests for collecting run artifacts into report tables."""

import pandas as pd
import pytest
from openpyxl import load_workbook

from cpudse.errors import ReportError
from cpudse.modules.report import SUMMARY_FILE, convergence_table, report


def _write(path, frame):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


@pytest.fixture
def results(tmp_path):
    root = tmp_path / "results"
    _write(root / "search-ga" / "history.csv", pd.DataFrame({
        "iteration": [0, 1, 2], "best_fitness": [0.5, 0.9, 1.0], "calls": [4, 7, 9], "wall_time": [0.1, 0.2, 0.3]}))
    _write(root / "search-abc" / "history.csv", pd.DataFrame({
        "iteration": [0, 1], "best_fitness": [0.95, 0.96], "calls": [2, 5], "wall_time": [0.1, 0.4]}))
    _write(root / "train-p" / "training_history.csv", pd.DataFrame({
        "model": ["trace-aware", "trace-aware"], "epoch": [1, 2], "train_loss": [1.0, 0.5],
        "validation_loss": [1.1, 0.7]}))
    _write(root / "train-p" / "evaluation.csv", pd.DataFrame({
        "model": ["trace-aware"], "mode": ["P"], "metric": ["ipc"], "split": ["validation"], "mse": [0.01]}))
    _write(root / "mast" / "trajectory.csv", pd.DataFrame({
        "step": [0, 1], "constraint": [0.1, 0.2], "objective": [0.3, 0.4], "rank_a": [0, 1]}))
    return root


def test_report_writes_every_table(results):
    written = report(results)
    names = sorted(p.name for p in written)
    assert names == sorted([
        "mast_trajectory__mast.csv", "convergence.csv", "convergence_summary.csv",
        "mse_comparison.csv", "training_curves.csv", SUMMARY_FILE,
    ])
    assert all(p.parent == results / "report" for p in written)

    trajectory = pd.read_csv(results / "report" / "mast_trajectory__mast.csv")
    assert list(trajectory.columns) == ["step", "constraint", "objective"]
    mse = pd.read_csv(results / "report" / "mse_comparison.csv")
    assert mse.loc[0, "run"] == "train-p"


def test_convergence_curves_are_paired(results):
    report(results)
    curves = pd.read_csv(results / "report" / "convergence.csv")
    assert list(curves.columns) == ["iteration", "search-abc", "search-ga"]
    assert len(curves) == 3
    assert pd.isna(curves.loc[2, "search-abc"])
    summary = pd.read_csv(results / "report" / "convergence_summary.csv").set_index("run")
    assert summary.loc["search-ga", "convergence_iteration"] == 1
    assert summary.loc["search-ga", "calls"] == 9


def test_summary_workbook_has_bold_headers(results, tmp_path):
    out = tmp_path / "elsewhere"
    report(results, out)
    wb = load_workbook(out / SUMMARY_FILE)
    assert "convergence" in wb.sheetnames
    header = wb["convergence"].cell(row=1, column=1)
    assert header.value == "iteration"
    assert header.font.bold


def test_report_ignores_its_own_output(results):
    report(results)
    (results / "report" / "history.csv").write_text("iteration,best_fitness\n0,5.0\n")
    report(results)
    curves = pd.read_csv(results / "report" / "convergence.csv")
    assert list(curves.columns) == ["iteration", "search-abc", "search-ga"]


def test_convergence_table_direct():
    frame = pd.DataFrame({"iteration": [0, 1], "best_fitness": [1.0, 2.0]})
    curves, summary = convergence_table([("a", frame)])
    assert list(curves.columns) == ["iteration", "a"]
    assert summary.loc[0, "calls"] == 0


def test_empty_or_missing_results(tmp_path):
    with pytest.raises(ReportError):
        report(tmp_path)
    with pytest.raises(ReportError):
        report(tmp_path / "absent")
