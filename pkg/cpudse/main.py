"""CLI entrypoint for the CPU design space exploration toolkit."""

from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence

import typer
from rich.console import Console
from rich.table import Table

from cpudse import config
from cpudse.console import console
from cpudse.errors import CpuDseError
from cpudse.modules.design_space import dump_design_space, load_design_space
from cpudse.modules.simulator import format_stats
from cpudse.modules.trace_models import MODE_M, MODE_P
from cpudse.pipeline import (
    build_dataset_step,
    gen_traces,
    mast_step,
    parse_list,
    predict_step,
    report_step,
    search_step,
    select_space,
    simulate_traces,
    smart_step,
    train_step,
)

app = typer.Typer(help="cpudse - workload-aware CPU design space exploration", no_args_is_help=True)


class Metric(str, Enum):
    IPC = "ipc"
    POWER = "power"
    OBJECTIVE = "objective"


class SubsystemChoice(str, Enum):
    IMEM = "imem"
    DMEM = "dmem"
    CORE = "core"
    BRANCH = "branch"
    ALL = "all"


@contextmanager
def errors_to_exit():
    """Validation failures become exit code 1 with a red diagnostic."""
    try:
        yield
    except (CpuDseError, ValueError) as e:
        console.print(f"[red]Error: {e}[/red]")
        raise typer.Exit(1)


def _subsystem(value: Optional[SubsystemChoice]) -> Optional[str]:
    return value.value if value is not None else None


def _out(out: Optional[Path], name: str) -> Path:
    return out if out is not None else config.OUTPUTS_DIR / name


# Shared option declarations
SPACE = typer.Option(None, "--space", help="Design-space file (built-in catalog by default)")
WEIGHTS = typer.Option(None, "--weights", help="Power/area weights file (built-in weights by default)")
TRACES = typer.Option(None, "--traces", help="Trace file or directory of *.trace files (repeatable)")
SEED = typer.Option(config.DEFAULT_SEED, "--seed", help="Random seed")
PARAMS = typer.Option(None, "--params", help="Comma-separated parameter names (toy sub-space)")
SUBSYSTEM = typer.Option(None, "--subsystem", help="Restrict to one subsystem")


@app.command("gen-traces")
def gen_traces_cmd(
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    workloads: Optional[str] = typer.Option(None, "--workloads",
                                            help="Comma-separated preset names or profile files (all presets by default)"),
    instructions: int = typer.Option(4096, "--instructions", min=1, help="Instructions per trace"),
    seed: int = SEED,
):
    """Generate synthetic traces from preset workload profiles."""
    with errors_to_exit():
        paths = gen_traces(_out(out, "traces"), parse_list(workloads), instructions, seed)
    typer.echo(f"Wrote {len(paths)} traces to {paths[0].parent}")


@app.command("simulate")
def simulate_cmd(
    traces: Optional[List[Path]] = TRACES,
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    weights: Optional[Path] = WEIGHTS,
    params: Optional[str] = PARAMS,
    subsystem: Optional[SubsystemChoice] = SUBSYSTEM,
    ranks: Optional[str] = typer.Option(None, "--ranks", help="Comma-separated ranks (baseline by default)"),
    chunk_len: int = typer.Option(config.CHUNK_LEN, "--chunk-len", min=1, help="Chunk length s"),
    chunks: Optional[int] = typer.Option(None, "--chunks", min=1, help="Simulate at most this many chunks"),
    seed: int = SEED,
):
    """Simulate trace chunks on one configuration and print the summed counters."""
    with errors_to_exit():
        total = simulate_traces(traces or [], _out(out, "simulate"), space, _subsystem(subsystem), params,
                                ranks, weights, chunk_len, chunks, seed)
    typer.echo(format_stats(total), nl=False)


@app.command("build-dataset")
def build_dataset_cmd(
    traces: Optional[List[Path]] = TRACES,
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    weights: Optional[Path] = WEIGHTS,
    params: Optional[str] = PARAMS,
    subsystem: Optional[SubsystemChoice] = SUBSYSTEM,
    configs: int = typer.Option(32, "--configs", min=1, help="Sampled configurations"),
    chunk_len: int = typer.Option(config.CHUNK_LEN, "--chunk-len", min=1, help="Chunk length s"),
    chunks: Optional[int] = typer.Option(None, "--chunks", min=1, help="Chunks per trace"),
    seed: int = SEED,
):
    """Simulate sampled configurations on every chunk and save a dataset."""
    with errors_to_exit():
        path = build_dataset_step(traces or [], _out(out, "dataset"), space, _subsystem(subsystem), params,
                                  weights, configs, chunk_len, chunks, seed)
    typer.echo(str(path))


def _train(mode: str, dataset: Path, out: Optional[Path], space: Optional[Path], metric: Metric,
           subsystem: Optional[SubsystemChoice], params: Optional[str], epochs: int, batch_size: int,
           learning_rate: float, seed: int, params_only: bool, baseline: bool) -> None:
    with errors_to_exit():
        path = train_step(mode, dataset, _out(out, f"train-{mode.lower()}"), space, metric.value,
                          _subsystem(subsystem), params, epochs, batch_size, learning_rate, seed,
                          params_only, baseline)
    typer.echo(str(path))


@app.command("train-p")
def train_p_cmd(
    dataset: Path = typer.Option(..., "--dataset", help="Dataset CSV"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    metric: Metric = typer.Option(Metric.OBJECTIVE, "--metric", help="Metric to predict"),
    epochs: int = typer.Option(config.EPOCHS, "--epochs", min=1),
    batch_size: int = typer.Option(config.BATCH_SIZE, "--batch-size", min=1),
    learning_rate: float = typer.Option(config.LEARNING_RATE, "--learning-rate"),
    params_only: bool = typer.Option(False, "--params-only", help="Train the parameters-only baseline"),
    baseline: bool = typer.Option(False, "--baseline", help="Also train the parameters-only baseline"),
    seed: int = SEED,
):
    """Train a parameters -> metric model."""
    _train(MODE_P, dataset, out, space, metric, None, None, epochs, batch_size, learning_rate, seed,
           params_only, baseline)


@app.command("train-m")
def train_m_cmd(
    dataset: Path = typer.Option(..., "--dataset", help="Dataset CSV"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    metric: Metric = typer.Option(Metric.OBJECTIVE, "--metric", help="Metric given as input"),
    subsystem: Optional[SubsystemChoice] = SUBSYSTEM,
    params: Optional[str] = PARAMS,
    epochs: int = typer.Option(config.EPOCHS, "--epochs", min=1),
    batch_size: int = typer.Option(config.BATCH_SIZE, "--batch-size", min=1),
    learning_rate: float = typer.Option(config.LEARNING_RATE, "--learning-rate"),
    seed: int = SEED,
):
    """Train a metric -> parameter ranks model."""
    _train(MODE_M, dataset, out, space, metric, subsystem, params, epochs, batch_size, learning_rate, seed,
           False, False)


@app.command("predict")
def predict_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Model checkpoint"),
    traces: Optional[List[Path]] = TRACES,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Use the chunks of this dataset"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    ranks: Optional[str] = typer.Option(None, "--ranks", help="P-mode configuration (baseline by default)"),
    target: Optional[float] = typer.Option(None, "--target", help="M-mode metric target"),
):
    """Predict a metric (P-mode) or a configuration (M-mode) for trace chunks."""
    with errors_to_exit():
        summary = predict_step(checkpoint, _out(out, "predict"), traces or [], dataset, ranks, target)
    typer.echo(summary)


@app.command("mast")
def mast_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="M-mode checkpoint"),
    traces: Optional[List[Path]] = TRACES,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Dataset (chunks and metric range)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    weights: Optional[Path] = WEIGHTS,
    c_i: Optional[float] = typer.Option(None, "--c-i", help="Initial constraint"),
    c_s: Optional[float] = typer.Option(None, "--c-s", help="Constraint step"),
    patience: int = typer.Option(config.MAST_PATIENCE, "--patience", min=1),
    max_iter: int = typer.Option(config.MAST_MAX_ITER, "--max-iter", min=1),
    delta: float = typer.Option(config.MAST_DELTA, "--delta", min=0.0),
    oracle: bool = typer.Option(True, "--oracle/--no-oracle", help="Score the trajectory by simulation"),
    eval_chunks: int = typer.Option(config.EVAL_CHUNKS, "--eval-chunks", min=1),
    seed: int = SEED,
):
    """Metric-space search: sweep the constraint until the predicted configuration settles."""
    with errors_to_exit():
        result = mast_step(checkpoint, _out(out, "mast"), traces or [], dataset, weights, c_i, c_s,
                           patience, max_iter, delta, oracle, eval_chunks, seed)
    typer.echo(",".join(map(str, result.config.ranks)))


def _search(algorithm: str, traces, dataset, out, space, weights, params, subsystem,
            population: int, iterations: int, vanilla: bool, eval_chunks: int, chunk_len: int, seed: int):
    with errors_to_exit():
        result = search_step(algorithm, _out(out, f"search-{algorithm}"), traces or [], dataset, space,
                             _subsystem(subsystem), params, weights, population, iterations, vanilla,
                             eval_chunks, chunk_len, seed)
    typer.echo(f"{result.fitness!r} {','.join(map(str, result.best.ranks))}")


@app.command("search-ga")
def search_ga_cmd(
    traces: Optional[List[Path]] = TRACES,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Use the chunks of this dataset"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    weights: Optional[Path] = WEIGHTS,
    params: Optional[str] = PARAMS,
    subsystem: Optional[SubsystemChoice] = SUBSYSTEM,
    population: int = typer.Option(config.GA_POPULATION, "--population", min=2),
    iterations: int = typer.Option(config.GA_ITERATIONS, "--iterations", min=1),
    vanilla: bool = typer.Option(False, "--vanilla", help="No annealing, no stagnation mutation"),
    eval_chunks: int = typer.Option(config.EVAL_CHUNKS, "--eval-chunks", min=1),
    chunk_len: int = typer.Option(config.CHUNK_LEN, "--chunk-len", min=1),
    seed: int = SEED,
):
    """Genetic algorithm over the simulation objective."""
    _search("ga", traces, dataset, out, space, weights, params, subsystem, population, iterations,
            vanilla, eval_chunks, chunk_len, seed)


@app.command("search-abc")
def search_abc_cmd(
    traces: Optional[List[Path]] = TRACES,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Use the chunks of this dataset"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    weights: Optional[Path] = WEIGHTS,
    params: Optional[str] = PARAMS,
    subsystem: Optional[SubsystemChoice] = SUBSYSTEM,
    population: int = typer.Option(config.GA_POPULATION, "--population", min=2),
    iterations: int = typer.Option(config.GA_ITERATIONS, "--iterations", min=1),
    vanilla: bool = typer.Option(False, "--vanilla", help="No annealing, no scout phase"),
    eval_chunks: int = typer.Option(config.EVAL_CHUNKS, "--eval-chunks", min=1),
    chunk_len: int = typer.Option(config.CHUNK_LEN, "--chunk-len", min=1),
    seed: int = SEED,
):
    """Artificial bee colony over the simulation objective."""
    _search("abc", traces, dataset, out, space, weights, params, subsystem, population, iterations,
            vanilla, eval_chunks, chunk_len, seed)


@app.command("search-exhaustive")
def search_exhaustive_cmd(
    traces: Optional[List[Path]] = TRACES,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Use the chunks of this dataset"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    weights: Optional[Path] = WEIGHTS,
    params: Optional[str] = PARAMS,
    subsystem: Optional[SubsystemChoice] = SUBSYSTEM,
    eval_chunks: int = typer.Option(config.EVAL_CHUNKS, "--eval-chunks", min=1),
    chunk_len: int = typer.Option(config.CHUNK_LEN, "--chunk-len", min=1),
    seed: int = SEED,
):
    """Evaluate every configuration of a small space (refused above the exhaustive cap)."""
    _search("exhaustive", traces, dataset, out, space, weights, params, subsystem, config.GA_POPULATION,
            config.GA_ITERATIONS, False, eval_chunks, chunk_len, seed)


@app.command("smart-finetune")
def smart_finetune_cmd(
    dataset: Path = typer.Option(..., "--dataset", help="Dataset CSV"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    space: Optional[Path] = SPACE,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Ensemble directory to start from"),
    weights: Optional[Path] = WEIGHTS,
    metric: Metric = typer.Option(Metric.OBJECTIVE, "--metric", help="Metric given as input"),
    lam: float = typer.Option(config.SMART_LAMBDA, "--lambda", min=0.0, help="Weight of the shared reward"),
    sigma: float = typer.Option(config.SMART_SIGMA, "--sigma", help="Sampling std in rank units"),
    epochs: int = typer.Option(1, "--epochs", min=1, help="Fine-tuning epochs"),
    pretrain_epochs: int = typer.Option(config.EPOCHS, "--pretrain-epochs", min=0,
                                        help="Supervised epochs per agent before fine-tuning"),
    batch_size: int = typer.Option(config.BATCH_SIZE, "--batch-size", min=1),
    learning_rate: float = typer.Option(config.LEARNING_RATE, "--learning-rate"),
    eval_chunks: int = typer.Option(config.EVAL_CHUNKS, "--eval-chunks", min=1),
    seed: int = SEED,
):
    """Jointly fine-tune the four subsystem agents with a shared simulation reward."""
    with errors_to_exit():
        smart_step(dataset, _out(out, "smart"), space, checkpoint, weights, metric.value, lam, sigma,
                   epochs, pretrain_epochs, batch_size, learning_rate, eval_chunks, seed)


@app.command("report")
def report_cmd(
    results: Path = typer.Argument(..., help="Results directory to scan"),
    out: Optional[Path] = typer.Option(None, "--out", help="Report directory (<results>/report by default)"),
):
    """Collect run artifacts into CSV series and summary.xlsx."""
    with errors_to_exit():
        written = report_step(results, out)
    for path in written:
        typer.echo(str(path))


def space_table(space) -> Table:
    table = Table(title=f"Design space ({len(space)} parameters)")
    table.add_column("#", justify="right")
    table.add_column("Parameter", style="cyan")
    table.add_column("Subsystem")
    table.add_column("Count", justify="right")
    table.add_column("Values")
    for i, p in enumerate(space.params):
        table.add_row(str(i), p.name, p.subsystem.value, str(p.cardinality), ", ".join(map(str, p.values)))
    return table


@app.command("dump-space")
def dump_space_cmd(
    space: Optional[Path] = SPACE,
    subsystem: Optional[SubsystemChoice] = SUBSYSTEM,
    text: bool = typer.Option(False, "--text", help="Print the design-space file format instead of a table"),
):
    """Print the design-space catalog."""
    with errors_to_exit():
        selected = select_space(load_design_space(space), _subsystem(subsystem))
    if text:
        typer.echo(dump_design_space(selected), nl=False)
    else:
        Console(width=200).print(space_table(selected))


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code (2 for usage errors, 1 for invalid input)."""
    try:
        app(args=list(argv) if argv is not None else None, prog_name="cpudse")
    except SystemExit as e:
        if e.code is None:
            return 0
        return e.code if isinstance(e.code, int) else 1
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
