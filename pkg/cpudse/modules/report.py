"""Collect run artifacts into plot-ready CSV series and an Excel summary."""

from pathlib import Path
from typing import Optional

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font

from cpudse.errors import ReportError
from cpudse.modules.metaheuristics import convergence_iteration

# Artifact names written by the CLI subcommands
MANIFEST_FILE = "run_manifest.json"
TRAJECTORY_FILE = "trajectory.csv"
SEARCH_HISTORY_FILE = "history.csv"
TRAINING_FILE = "training_history.csv"
EVALUATION_FILE = "evaluation.csv"
FINETUNE_FILE = "finetune_history.csv"

REPORT_DIR = "report"
SUMMARY_FILE = "summary.xlsx"


def _run_label(path: Path, root: Path) -> str:
    rel = path.parent.relative_to(root)
    return rel.as_posix() if rel.parts else root.name


def _collect(root: Path, name: str, skip: Path) -> list[tuple[str, pd.DataFrame]]:
    found = []
    for path in sorted(root.rglob(name)):
        if skip in path.parents:
            continue
        found.append((_run_label(path, root), pd.read_csv(path)))
    return found


def trajectory_series(runs: list[tuple[str, pd.DataFrame]]) -> dict[str, pd.DataFrame]:
    """One (step, constraint, objective) series per metric-space search run."""
    series = {}
    for label, frame in runs:
        cols = [c for c in ("step", "constraint", "objective") if c in frame.columns]
        series[label] = frame[cols]
    return series


def convergence_table(runs: list[tuple[str, pd.DataFrame]]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Paired best-so-far curves (one column per search run) and a per-run summary
    with the 90%-of-peak convergence iteration.
    """
    curves = None
    summary = []
    for label, frame in runs:
        curve = frame[["iteration", "best_fitness"]].rename(columns={"best_fitness": label})
        curves = curve if curves is None else curves.merge(curve, on="iteration", how="outer")
        summary.append({
            "run": label,
            "final_fitness": float(frame["best_fitness"].iloc[-1]),
            "convergence_iteration": convergence_iteration(frame["best_fitness"].tolist()),
            "calls": int(frame["calls"].iloc[-1]) if "calls" in frame.columns else 0,
            "wall_time": float(frame["wall_time"].iloc[-1]) if "wall_time" in frame.columns else 0.0,
        })
    curves = curves.sort_values("iteration").reset_index(drop=True)
    return curves, pd.DataFrame(summary)


def _stack(runs: list[tuple[str, pd.DataFrame]]) -> pd.DataFrame:
    return pd.concat([frame.assign(run=label) for label, frame in runs], ignore_index=True)


def export_summary(tables: dict[str, pd.DataFrame], output_path: Path) -> None:
    """One sheet per table, bold centred headers."""
    wb = Workbook()
    wb.remove(wb.active)
    for title, frame in tables.items():
        ws = wb.create_sheet(title=title[:31])
        for col_idx, col_name in enumerate(frame.columns, 1):
            cell = ws.cell(row=1, column=col_idx, value=str(col_name))
            cell.font = Font(bold=True)
            cell.alignment = Alignment(horizontal="center")
        for row_idx, record in enumerate(frame.itertuples(index=False), 2):
            for col_idx, value in enumerate(record, 1):
                ws.cell(row=row_idx, column=col_idx, value=None if pd.isna(value) else value)
        for col_idx, col_name in enumerate(frame.columns, 1):
            max_len = max(len(str(col_name)), 12)
            ws.column_dimensions[ws.cell(row=1, column=col_idx).column_letter].width = min(max_len + 2, 50)

    output_path.parent.mkdir(parents=True, exist_ok=True)
    wb.save(output_path)


def report(results_dir: Path, out_dir: Optional[Path] = None) -> list[Path]:
    """
    Scan `results_dir` for run artifacts and write CSV series plus summary.xlsx.

    Returns:
        Paths of the files written.

    Raises:
        ReportError when no artifact is found.
    """
    root = Path(results_dir)
    if not root.is_dir():
        raise ReportError(f"Results directory not found: {root}")
    out = Path(out_dir) if out_dir is not None else root / REPORT_DIR

    trajectories = _collect(root, TRAJECTORY_FILE, out)
    searches = _collect(root, SEARCH_HISTORY_FILE, out)
    trainings = _collect(root, TRAINING_FILE, out)
    evaluations = _collect(root, EVALUATION_FILE, out)
    finetunes = _collect(root, FINETUNE_FILE, out)
    if not any((trajectories, searches, trainings, evaluations, finetunes)):
        raise ReportError(f"Nothing to report in {root}")

    tables: dict[str, pd.DataFrame] = {}
    written: list[Path] = []
    out.mkdir(parents=True, exist_ok=True)

    def emit(name: str, frame: pd.DataFrame) -> None:
        path = out / f"{name}.csv"
        frame.to_csv(path, index=False, lineterminator="\n")
        written.append(path)
        tables[name] = frame

    for label, frame in trajectory_series(trajectories).items():
        emit(f"mast_trajectory__{label.replace('/', '__')}", frame)
    if searches:
        curves, summary = convergence_table(searches)
        emit("convergence", curves)
        emit("convergence_summary", summary)
    if evaluations:
        emit("mse_comparison", _stack(evaluations))
    if trainings:
        emit("training_curves", _stack(trainings))
    if finetunes:
        emit("finetune_curves", _stack(finetunes))

    summary_path = out / SUMMARY_FILE
    export_summary(tables, summary_path)
    written.append(summary_path)
    return written
