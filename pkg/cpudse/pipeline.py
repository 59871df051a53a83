"""Pipeline steps behind the CLI subcommands.

Every step writes its artifacts plus a run_manifest.json into its output
directory and reports progress on the shared console.
"""

import json
import platform
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from rich.progress import Progress, SpinnerColumn, TextColumn

from cpudse import __version__, config
from cpudse.console import console
from cpudse.errors import ConfigurationError, DatasetError, ModelError, SearchError, TraceParseError
from cpudse.modules.datagen import build_dataset, load_chunks, load_dataset, save_dataset, space_fingerprint, split
from cpudse.modules.design_space import (
    baseline_config,
    decode_named,
    enumerate_configs,
    load_design_space,
    normalize,
    sample_config,
    select_params,
    space_size,
    subsystem_subset,
    validate_config,
)
from cpudse.modules.fingerprint import file_digest
from cpudse.modules.mast import default_spec, mast_search
from cpudse.modules.metaheuristics import (
    Evaluator,
    abc_search,
    exhaustive_search,
    ga_search,
    simulation_objective,
)
from cpudse.modules.metrics import compute_metrics, load_weights, metric_value, objective
from cpudse.modules.report import (
    EVALUATION_FILE,
    FINETUNE_FILE,
    MANIFEST_FILE,
    SEARCH_HISTORY_FILE,
    TRAINING_FILE,
    TRAJECTORY_FILE,
    report,
)
from cpudse.modules.simulator import simulate, stats_row
from cpudse.modules.smart import (
    AgentEnsemble,
    build_ensemble,
    ensemble_rank_mse,
    load_ensemble,
    save_ensemble,
    smart_finetune,
)
from cpudse.modules.trace import (
    PRESET_PROFILES,
    TokenDict,
    build_dictionary,
    chunk_trace,
    format_profile,
    format_trace,
    generate_synthetic_trace,
    parse_profile,
    parse_trace,
    tokenize_chunk,
)
from cpudse.modules.trace_models import (
    MODE_M,
    MODE_P,
    PredictorModel,
    aggregate_workload,
    batched_inference,
    default_model_config,
    evaluate_mse,
    init_model,
    load_model,
    round_ranks,
    save_model,
    train,
)
from cpudse.schemas import (
    Chunk,
    ChunkSource,
    Configuration,
    Dataset,
    DesignSpace,
    RunManifest,
    SearchSpec,
    SimStats,
    TrainSpec,
)

TRACE_SUFFIX = ".trace"
PROFILE_SUFFIX = ".profile"
DATASET_FILE = "dataset.csv"
MODEL_FILE = "model.ckpt"
BASELINE_MODEL_FILE = "baseline.ckpt"
ENSEMBLE_DIR = "ensemble"

_PACKAGES = ("numpy", "pandas", "pydantic", "openpyxl", "typer", "rich", "python-dotenv")


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
    )


# ---------------------------------------------------------------------------
# Manifests and small helpers
# ---------------------------------------------------------------------------

def package_versions() -> dict[str, str]:
    versions = {"cpudse": __version__, "python": platform.python_version()}
    for name in _PACKAGES:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_manifest(out_dir: Path, command: str, arguments: dict, seeds: dict[str, int],
                   inputs: Sequence[Optional[Path]] = ()) -> Path:
    """Record what is needed to re-run `command`: arguments, seeds, versions, input digests."""
    manifest = RunManifest(
        command=command,
        arguments={k: str(v) for k, v in arguments.items() if v is not None},
        seeds=seeds,
        versions=package_versions(),
        inputs={str(p): file_digest(p) for p in inputs if p is not None and Path(p).exists()},
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest.model_dump(), indent=2) + "\n", encoding="utf-8")
    return path


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def parse_list(text: Optional[str]) -> list[str]:
    """Comma-separated list; None or blank gives an empty list."""
    if not text:
        return []
    return [item.strip() for item in text.split(",") if item.strip()]


def parse_ranks(text: str, space: DesignSpace) -> Configuration:
    try:
        ranks = tuple(int(r) for r in parse_list(text))
    except ValueError:
        raise ConfigurationError(f"Ranks must be integers, got '{text}'")
    cfg = Configuration(ranks=ranks)
    validate_config(cfg, space)
    return cfg


def select_space(space: DesignSpace, subsystem: Optional[str] = None,
                 params: Optional[str] = None) -> DesignSpace:
    """Restrict a space to named parameters or to one subsystem ("all" keeps everything)."""
    names = parse_list(params)
    if names:
        return select_params(space, names)
    if subsystem and subsystem.lower() != "all":
        return subsystem_subset(space, subsystem)
    return space


def _trace_files(paths: Sequence[Path]) -> list[Path]:
    files: list[Path] = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files.extend(sorted(path.glob(f"*{TRACE_SUFFIX}")))
        elif path.exists():
            files.append(path)
        else:
            raise TraceParseError(f"Trace file not found: {path}")
    if not files:
        raise TraceParseError("No trace files given")
    return files


def read_traces(paths: Sequence[Path]) -> list[tuple[Path, list]]:
    """(path, records) for every trace file; directories contribute their *.trace files."""
    out = []
    for path in _trace_files(paths):
        try:
            records = parse_trace(path.read_text(encoding="utf-8"))
        except TraceParseError as e:
            raise TraceParseError(f"{path}: {e}")
        out.append((path, records))
    return out


def trace_chunks(paths: Sequence[Path], s: int, per_trace: Optional[int] = None) -> tuple[list[Chunk], list[ChunkSource]]:
    """Chunks of every trace with globally unique ids, plus where each one came from."""
    chunks, sources = [], []
    for path, records in read_traces(paths):
        pieces = chunk_trace(records, s)
        if per_trace is not None:
            pieces = pieces[:per_trace]
        for index, piece in enumerate(pieces):
            chunk_id = len(chunks)
            chunks.append(Chunk(id=chunk_id, records=piece.records))
            sources.append(ChunkSource(chunk_id=chunk_id, trace=str(path.resolve()), index=index,
                                       instructions=len(piece), workload=path.stem))
    if not chunks:
        raise TraceParseError("Traces hold no instructions")
    return chunks, sources


def _tokens(chunks: Sequence[Chunk], dictionary: TokenDict, s: int) -> dict[int, np.ndarray]:
    return {c.id: tokenize_chunk(c, dictionary, s, strict=False) for c in chunks}


def _eval_chunks(traces: Sequence[Path], dataset_path: Optional[Path], s: int,
                 limit: int) -> list[Chunk]:
    """Chunk set for oracle evaluation: the dataset's chunks, else the traces'."""
    if dataset_path is not None:
        dataset = load_dataset(dataset_path)
        chunks = load_chunks(dataset.header, Path(dataset_path).parent)
        picked = [chunks[c] for c in sorted(chunks)]
    elif traces:
        picked, _ = trace_chunks(traces, s)
    else:
        raise ConfigurationError("Need --traces or --dataset for the evaluation chunks")
    return picked[:limit]


class DatasetBundle:
    """A loaded dataset together with its space, dictionary and tokenised chunks."""

    def __init__(self, path: Path, space_path: Optional[Path] = None):
        self.path = Path(path)
        self.dataset: Dataset = load_dataset(self.path)
        header = self.dataset.header
        self.space = select_params(load_design_space(space_path), header.param_names)
        if space_fingerprint(self.space) != header.space_fingerprint:
            raise DatasetError(f"Dataset {self.path} was built for a different design space")
        if not header.dictionary:
            raise DatasetError(f"Dataset {self.path} does not record its token dictionary")
        self.dictionary = TokenDict(tuple(header.dictionary))
        self.chunks = load_chunks(header, self.path.parent)
        self.tokens = _tokens(list(self.chunks.values()), self.dictionary, header.s)

    @property
    def s(self) -> int:
        return self.dataset.header.s


# ---------------------------------------------------------------------------
# gen-traces
# ---------------------------------------------------------------------------

def gen_traces(out_dir: Path, workloads: Sequence[str] = (), instructions: int = 4096,
               seed: int = config.DEFAULT_SEED) -> list[Path]:
    """
    Write one synthetic trace (and its profile) per workload.

    Workloads are preset names or paths to profile files; the seed is added to
    each profile's own seed.
    """
    names = list(workloads) or list(PRESET_PROFILES)
    written: list[Path] = []
    inputs: list[Path] = []
    console.print(f"[bold blue]Generating {len(names)} traces of {instructions} instructions[/bold blue]")
    for name in names:
        if name in PRESET_PROFILES:
            profile, stem = PRESET_PROFILES[name], name
        elif Path(name).exists():
            profile, stem = parse_profile(Path(name).read_text(encoding="utf-8")), Path(name).stem
            inputs.append(Path(name))
        else:
            raise ConfigurationError(
                f"Unknown workload '{name}' (presets: {', '.join(PRESET_PROFILES)}, or a profile file)")
        profile = profile.model_copy(update={"seed": profile.seed + seed})
        records = generate_synthetic_trace(profile, instructions)
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_path = out_dir / f"{stem}{TRACE_SUFFIX}"
        trace_path.write_text(format_trace(records), encoding="utf-8")
        (out_dir / f"{stem}{PROFILE_SUFFIX}").write_text(format_profile(profile), encoding="utf-8")
        written.append(trace_path)
        console.print(f"  [dim]{trace_path}[/dim]")

    write_manifest(out_dir, "gen-traces", {"workloads": ",".join(names), "instructions": instructions},
                   {"seed": seed}, inputs)
    return written


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def simulate_traces(traces: Sequence[Path], out_dir: Path, space_path: Optional[Path] = None,
                    subsystem: Optional[str] = None, params: Optional[str] = None,
                    ranks: Optional[str] = None, weights_path: Optional[Path] = None,
                    s: int = config.CHUNK_LEN, max_chunks: Optional[int] = None,
                    seed: int = config.DEFAULT_SEED) -> SimStats:
    """Simulate every chunk on one configuration (baseline unless ranks are given); returns summed stats."""
    space = select_space(load_design_space(space_path), subsystem, params)
    cfg = parse_ranks(ranks, space) if ranks else baseline_config(space)
    power_w, area_w = load_weights(weights_path, space.names)
    chunks, sources = trace_chunks(traces, s)
    if max_chunks is not None:
        chunks, sources = chunks[:max_chunks], sources[:max_chunks]

    rows = []
    total = SimStats()
    with _progress() as progress:
        task = progress.add_task(f"[yellow]Simulating {len(chunks)} chunks...", total=len(chunks))
        for chunk, source in zip(chunks, sources):
            stats = simulate(chunk, cfg, space, seed=seed)
            metrics = compute_metrics(stats, cfg, space, power_w, area_w)
            rows.append(stats_row(stats, trace=source.workload, chunk=source.index, **metrics.model_dump()))
            total = total + stats
            progress.advance(task)

    _write_csv(pd.DataFrame(rows), out_dir / "stats.csv")
    write_manifest(out_dir, "simulate",
                   {"space": space_path, "subsystem": subsystem, "params": params,
                    "ranks": ",".join(map(str, cfg.ranks)), "s": s, "chunks": max_chunks},
                   {"seed": seed}, [*traces, space_path, weights_path])
    console.print(f"[cyan]Simulated {len(chunks)} chunks; stats in {out_dir / 'stats.csv'}[/cyan]")
    return total


# ---------------------------------------------------------------------------
# build-dataset
# ---------------------------------------------------------------------------

def sample_configs(space: DesignSpace, n: int, rng: np.random.Generator) -> list[Configuration]:
    """Every configuration when the space holds at most n, else n distinct uniform samples."""
    if n < 1:
        raise ConfigurationError(f"Need at least one configuration, got {n}")
    if space_size(space) <= n:
        return list(enumerate_configs(space))
    picked: dict[tuple[int, ...], Configuration] = {}
    attempts = 0
    while len(picked) < n and attempts < 100 * n:
        cfg = sample_config(space, rng)
        picked.setdefault(cfg.ranks, cfg)
        attempts += 1
    return list(picked.values())


def build_dataset_step(traces: Sequence[Path], out_dir: Path, space_path: Optional[Path] = None,
                       subsystem: Optional[str] = None, params: Optional[str] = None,
                       weights_path: Optional[Path] = None, n_configs: int = 32,
                       s: int = config.CHUNK_LEN, per_trace: Optional[int] = None,
                       seed: int = config.DEFAULT_SEED) -> Path:
    """Simulate sampled configurations on every chunk and save the dataset."""
    space = select_space(load_design_space(space_path), subsystem, params)
    power_w, area_w = load_weights(weights_path, space.names)
    chunks, sources = trace_chunks(traces, s, per_trace)
    dictionary = build_dictionary((r for c in chunks for r in c.records), reserve_unknown=True)
    configs = sample_configs(space, n_configs, np.random.default_rng(seed))

    console.print(f"[bold blue]Building dataset: {len(chunks)} chunks x {len(configs)} configurations "
                  f"over {len(space)} parameters[/bold blue]")
    with _progress() as progress:
        task = progress.add_task("[yellow]Simulating...", total=len(chunks))
        dataset = build_dataset(chunks, configs, space, dictionary, s, power_w, area_w, seed=seed,
                                chunk_sources=sources, on_chunk=lambda _: progress.advance(task))

    path = save_dataset(dataset, out_dir / DATASET_FILE)
    write_manifest(out_dir, "build-dataset",
                   {"space": space_path, "subsystem": subsystem, "params": params,
                    "configs": n_configs, "s": s, "chunks": per_trace},
                   {"seed": seed}, [*traces, space_path, weights_path])
    if dataset.header.failures:
        console.print(f"[yellow]{dataset.header.failures} pairs failed and were left out[/yellow]")
    console.print(f"[cyan]Saved {len(dataset.rows)} rows to {path}[/cyan]")
    return path


# ---------------------------------------------------------------------------
# train-p / train-m
# ---------------------------------------------------------------------------

def _train_one(model: PredictorModel, bundle: DatasetBundle, spec: TrainSpec, label: str,
               progress: Progress) -> tuple[PredictorModel, list[dict]]:
    task = progress.add_task(f"[yellow]Training {label}...", total=spec.epochs)

    def on_epoch(record):
        progress.update(task, advance=1,
                        description=f"[yellow]Training {label}: epoch {record.epoch} loss {record.train_loss:.4f}")

    model, history = train(model, bundle.dataset, bundle.tokens, spec, on_epoch)
    return model, [{"model": label, **r.model_dump()} for r in history]


def _evaluation_rows(model: PredictorModel, label: str, bundle: DatasetBundle, spec: TrainSpec) -> list[dict]:
    train_set, valid_set = split(bundle.dataset, 1.0 - spec.validation_fraction, spec.seed)
    rows = []
    for name, part in (("train", train_set), ("validation", valid_set)):
        if part.rows:
            rows.append({"model": label, "mode": model.mode, "metric": model.metric, "split": name,
                         "mse": evaluate_mse(model, part, bundle.tokens)})
    return rows


def train_step(mode: str, dataset_path: Path, out_dir: Path, space_path: Optional[Path] = None,
               metric: str = "objective", subsystem: Optional[str] = None, params: Optional[str] = None,
               epochs: int = config.EPOCHS, batch_size: int = config.BATCH_SIZE,
               learning_rate: float = config.LEARNING_RATE, seed: int = config.DEFAULT_SEED,
               params_only: bool = False, with_baseline: bool = False) -> Path:
    """
    Train a P- or M-mode model on a dataset and save its checkpoint.

    Args:
        mode: "P" (parameters -> metric) or "M" (metric -> parameter ranks)
        subsystem, params: Subset an M-mode model predicts (whole dataset space by default)
        params_only: Train the parameters-only baseline instead of the trace-aware model
        with_baseline: Also train the parameters-only baseline and compare both
    """
    bundle = DatasetBundle(dataset_path, space_path)
    model_space = bundle.space if mode == MODE_P else select_space(bundle.space, subsystem, params)
    if not len(model_space):
        raise ModelError(f"Subsystem '{subsystem}' has no parameter in the dataset space")
    spec = TrainSpec(epochs=epochs, batch_size=batch_size, learning_rate=learning_rate, seed=seed,
                     validation_fraction=config.VALIDATION_FRACTION)
    model_config = default_model_config(bundle.dictionary.vocab, bundle.s)

    variants = [("params-only" if params_only else "trace-aware", not params_only, MODEL_FILE)]
    if with_baseline and not params_only:
        variants.append(("params-only", False, BASELINE_MODEL_FILE))

    command = "train-p" if mode == MODE_P else "train-m"
    console.print(f"[bold blue]{command}: {len(bundle.dataset.rows)} rows, metric {metric}, "
                  f"{len(model_space)} parameters[/bold blue]")
    history, evaluation = [], []
    out_dir.mkdir(parents=True, exist_ok=True)
    with _progress() as progress:
        for label, trace_aware, filename in variants:
            model = init_model(mode, model_space, bundle.dictionary, model_config, metric,
                               trace_aware=trace_aware, seed=seed)
            model, rows = _train_one(model, bundle, spec, label, progress)
            history.extend(rows)
            evaluation.extend(_evaluation_rows(model, label, bundle, spec))
            save_model(model, out_dir / filename)

    _write_csv(pd.DataFrame(history), out_dir / TRAINING_FILE)
    _write_csv(pd.DataFrame(evaluation), out_dir / EVALUATION_FILE)
    write_manifest(out_dir, command,
                   {"dataset": dataset_path, "space": space_path, "metric": metric, "subsystem": subsystem,
                    "params": params, "epochs": epochs, "batch_size": batch_size,
                    "learning_rate": learning_rate, "params_only": params_only, "baseline": with_baseline},
                   {"seed": seed}, [dataset_path, space_path])
    for row in evaluation:
        console.print(f"[cyan]{row['model']} {row['split']} MSE: {row['mse']:.6g}[/cyan]")
    return out_dir / MODEL_FILE


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _model_chunks(model: PredictorModel, traces: Sequence[Path],
                  dataset_path: Optional[Path]) -> tuple[list[Chunk], list[ChunkSource]]:
    if dataset_path is not None:
        header = load_dataset(dataset_path).header
        chunks = load_chunks(header, Path(dataset_path).parent)
        sources = sorted(header.chunk_sources, key=lambda c: c.chunk_id)
        return [chunks[c.chunk_id] for c in sources], sources
    if traces:
        return trace_chunks(traces, model.config.s)
    raise ConfigurationError("Need --traces or --dataset")


def predict_step(checkpoint: Path, out_dir: Path, traces: Sequence[Path] = (),
                 dataset_path: Optional[Path] = None, ranks: Optional[str] = None,
                 target: Optional[float] = None) -> str:
    """
    Run a trained model over chunks.

    P-mode predicts the metric of one configuration (baseline unless ranks are
    given) per chunk and per workload; M-mode predicts the configuration that
    reaches `target`. Returns a one-line summary.
    """
    model = load_model(checkpoint)
    chunks, sources = _model_chunks(model, traces, dataset_path)
    tokens = [tokenize_chunk(c, model.dictionary, model.config.s, strict=False) for c in chunks]
    out_dir.mkdir(parents=True, exist_ok=True)

    if model.mode == MODE_P:
        cfg = parse_ranks(ranks, model.space) if ranks else baseline_config(model.space)
        values = batched_inference(model, tokens, normalize(cfg, model.space))
        frame = pd.DataFrame({"workload": [s.workload for s in sources], "chunk": [s.index for s in sources],
                              "instructions": [s.instructions for s in sources], model.metric: values})
        _write_csv(frame, out_dir / "predictions.csv")
        per_workload = [
            {"workload": name, model.metric: aggregate_workload(group[model.metric], group["instructions"])}
            for name, group in frame.groupby("workload", sort=True)
        ]
        _write_csv(pd.DataFrame(per_workload), out_dir / "workload_predictions.csv")
        overall = aggregate_workload(values, frame["instructions"])
        summary = f"predicted {model.metric}: {overall:.6g}"
    else:
        if target is None:
            raise ConfigurationError("M-mode prediction needs --target")
        raw = batched_inference(model, tokens, target)
        frame = pd.DataFrame(raw, columns=model.space.names)
        frame.insert(0, "chunk", [s.index for s in sources])
        frame.insert(0, "workload", [s.workload for s in sources])
        _write_csv(frame, out_dir / "predictions.csv")
        cfg = round_ranks(raw.mean(axis=0), model.space)
        _write_config(cfg, model.space, out_dir / "predicted_config.csv")
        summary = "predicted ranks: " + ",".join(map(str, cfg.ranks))

    write_manifest(out_dir, "predict", {"checkpoint": checkpoint, "dataset": dataset_path,
                                        "ranks": ranks, "target": target},
                   {}, [checkpoint, dataset_path, *traces])
    return summary


def _write_config(cfg: Configuration, space: DesignSpace, path: Path) -> Path:
    values = decode_named(cfg, space)
    frame = pd.DataFrame({"parameter": space.names, "rank": list(cfg.ranks),
                          "value": [values[n] for n in space.names]})
    return _write_csv(frame, path)


# ---------------------------------------------------------------------------
# mast
# ---------------------------------------------------------------------------

def mast_step(checkpoint: Path, out_dir: Path, traces: Sequence[Path] = (),
              dataset_path: Optional[Path] = None, weights_path: Optional[Path] = None,
              c_i: Optional[float] = None, c_s: Optional[float] = None,
              patience: int = config.MAST_PATIENCE, max_iter: int = config.MAST_MAX_ITER,
              delta: float = config.MAST_DELTA, use_oracle: bool = True,
              eval_chunks: int = config.EVAL_CHUNKS, seed: int = config.DEFAULT_SEED):
    """
    Metric-space search with an M-mode checkpoint.

    The sweep start and step default to the dataset's metric range; without a
    dataset both must be given. With the oracle on, the trajectory is scored
    by simulation after the sweep.
    """
    model = load_model(checkpoint)
    if model.mode != MODE_M:
        raise SearchError("mast needs an M-mode checkpoint (train-m)")
    chunks, _ = _model_chunks(model, traces, dataset_path)
    tokens = [tokenize_chunk(c, model.dictionary, model.config.s, strict=False) for c in chunks]

    overrides = dict(c_i=c_i, c_s=c_s, patience=patience, max_iter=max_iter, delta=delta)
    if dataset_path is not None:
        values = [metric_value(r.metrics, model.metric) for r in load_dataset(dataset_path).rows]
        spec = default_spec(values, **overrides)
    elif c_i is None or c_s is None:
        raise ConfigurationError("Without --dataset both --c-i and --c-s are needed")
    else:
        spec = default_spec([c_i], **overrides)

    oracle = None
    if use_oracle:
        _, area_w = load_weights(weights_path, model.space.names)
        oracle = simulation_objective(chunks[:eval_chunks], model.space, area_w, seed)

    console.print(f"[bold blue]Metric-space search from {spec.c_i:.6g} in steps of {spec.c_s:.6g}[/bold blue]")
    with _progress() as progress:
        progress.add_task("[yellow]Sweeping constraint...", total=None)
        result = mast_search(model, tokens, spec, oracle)

    rank_cols = {f"rank_{n}": [s.ranks[j] for s in result.trajectory] for j, n in enumerate(result.param_names)}
    trajectory = pd.DataFrame({
        "step": [s.step for s in result.trajectory],
        "constraint": [s.constraint for s in result.trajectory],
        "objective": [s.objective for s in result.trajectory],
        **rank_cols,
    })
    _write_csv(trajectory, out_dir / TRAJECTORY_FILE)
    (out_dir / "mast_result.json").write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
    _write_config(result.config, model.space, out_dir / "converged_config.csv")
    roles = ([{"parameter": n, "role": "critical"} for n in result.report.critical]
             + [{"parameter": n, "role": "flexible"} for n in result.report.flexible])
    _write_csv(pd.DataFrame(roles, columns=["parameter", "role"]), out_dir / "critical.csv")
    write_manifest(out_dir, "mast",
                   {"checkpoint": checkpoint, "dataset": dataset_path, "c_i": spec.c_i, "c_s": spec.c_s,
                    "patience": spec.patience, "max_iter": spec.max_iter, "delta": spec.delta,
                    "oracle": use_oracle, "eval_chunks": eval_chunks},
                   {"seed": seed}, [checkpoint, dataset_path, weights_path, *traces])

    state = "converged" if result.converged else "did not converge"
    console.print(f"[cyan]Search {state} after {result.n + 1} steps[/cyan]")
    return result


# ---------------------------------------------------------------------------
# search-ga / search-abc / search-exhaustive
# ---------------------------------------------------------------------------

SEARCHES: dict[str, Callable] = {"ga": ga_search, "abc": abc_search}


def search_step(algorithm: str, out_dir: Path, traces: Sequence[Path] = (),
                dataset_path: Optional[Path] = None, space_path: Optional[Path] = None,
                subsystem: Optional[str] = None, params: Optional[str] = None,
                weights_path: Optional[Path] = None, population: int = config.GA_POPULATION,
                iterations: int = config.GA_ITERATIONS, vanilla: bool = False,
                eval_chunks: int = config.EVAL_CHUNKS, s: int = config.CHUNK_LEN,
                seed: int = config.DEFAULT_SEED):
    """Oracle-driven search ("ga", "abc" or "exhaustive") over a (sub)space."""
    space = select_space(load_design_space(space_path), subsystem, params)
    _, area_w = load_weights(weights_path, space.names)
    chunks = _eval_chunks(traces, dataset_path, s, eval_chunks)
    evaluator = Evaluator(simulation_objective(chunks, space, area_w, seed), space)

    console.print(f"[bold blue]search-{algorithm}: {len(space)} parameters, "
                  f"{len(chunks)} evaluation chunks[/bold blue]")
    if algorithm == "exhaustive":
        with _progress() as progress:
            progress.add_task(f"[yellow]Evaluating {space_size(space)} configurations...", total=None)
            result = exhaustive_search(space, evaluator)
    elif algorithm in SEARCHES:
        spec = SearchSpec(population=population, iterations=iterations, tournament=config.GA_TOURNAMENT,
                          crossover_rate=config.GA_CROSSOVER_RATE, m0=config.GA_M0, alpha=config.GA_ALPHA,
                          stagnation=config.GA_STAGNATION, seed=seed,
                          anneal=not vanilla, stagnation_mutation=not vanilla)
        with _progress() as progress:
            task = progress.add_task("[yellow]Searching...", total=iterations)

            def on_iteration(point):
                if point.iteration:
                    progress.update(task, advance=1, description=f"[yellow]Iteration {point.iteration}: "
                                                                 f"best {point.best_fitness:.6g}")

            result = SEARCHES[algorithm](space, evaluator, spec, on_iteration)
    else:
        raise SearchError(f"Unknown search algorithm '{algorithm}'")

    _write_csv(pd.DataFrame([h.model_dump() for h in result.history]), out_dir / SEARCH_HISTORY_FILE)
    (out_dir / "search_result.json").write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
    _write_config(result.best, space, out_dir / "best_config.csv")
    write_manifest(out_dir, f"search-{algorithm}",
                   {"dataset": dataset_path, "space": space_path, "subsystem": subsystem, "params": params,
                    "population": population, "iterations": iterations, "vanilla": vanilla,
                    "eval_chunks": eval_chunks, "s": s},
                   {"seed": seed}, [dataset_path, space_path, weights_path, *traces])
    console.print(f"[cyan]Best objective {result.fitness:.6g} after {result.calls} simulations[/cyan]")
    return result


# ---------------------------------------------------------------------------
# smart-finetune
# ---------------------------------------------------------------------------

def _reward(chunks: dict[int, Chunk], space: DesignSpace, area_w, seed: int, limit: int):
    def perf(cfg: Configuration, chunk_ids: Sequence[int]) -> float:
        picked = [chunks[c] for c in list(chunk_ids)[:limit]]
        return float(np.mean([objective(simulate(c, cfg, space, seed=seed), cfg, space, area_w) for c in picked]))
    return perf


def smart_step(dataset_path: Path, out_dir: Path, space_path: Optional[Path] = None,
               checkpoint: Optional[Path] = None, weights_path: Optional[Path] = None,
               metric: str = "objective", lam: float = config.SMART_LAMBDA,
               sigma: float = config.SMART_SIGMA, epochs: int = 1,
               pretrain_epochs: int = config.EPOCHS, batch_size: int = config.BATCH_SIZE,
               learning_rate: float = config.LEARNING_RATE, eval_chunks: int = config.EVAL_CHUNKS,
               seed: int = config.DEFAULT_SEED) -> AgentEnsemble:
    """
    Fine-tune the four subsystem agents with the shared simulation reward.

    Agents come from an ensemble checkpoint directory or are pre-trained on
    the training chunks first. Held-out rank MSE is reported before and after.
    """
    bundle = DatasetBundle(dataset_path, space_path)
    fit_set, held_set = split(bundle.dataset, 1.0 - config.VALIDATION_FRACTION, seed)
    spec = TrainSpec(epochs=max(pretrain_epochs, 1), batch_size=batch_size, learning_rate=learning_rate,
                     seed=seed, validation_fraction=config.VALIDATION_FRACTION)

    console.print(f"[bold blue]smart-finetune: lambda {lam}, {len(fit_set.rows)} training rows[/bold blue]")
    with _progress() as progress:
        if checkpoint is not None:
            loaded = load_ensemble(checkpoint)
            if space_fingerprint(loaded.space) != space_fingerprint(bundle.space):
                raise DatasetError("Ensemble and dataset were built for different design spaces")
            ensemble = AgentEnsemble(space=loaded.space, agents=loaded.agents, lam=lam, baseline=loaded.baseline)
        else:
            ensemble = build_ensemble(bundle.space, bundle.dictionary,
                                      default_model_config(bundle.dictionary.vocab, bundle.s),
                                      metric, lam, seed)
            if pretrain_epochs > 0:
                for tag, agent in ensemble.agents.items():
                    task = progress.add_task(f"[yellow]Pre-training {tag} agent...", total=spec.epochs)
                    train(agent, fit_set, bundle.tokens, spec, lambda _r, t=task: progress.advance(t))

        before = ensemble_rank_mse(ensemble, held_set, bundle.tokens) if held_set.rows else None
        progress.add_task(f"[yellow]Fine-tuning for {epochs} epochs...", total=None)
        area_w = load_weights(weights_path, bundle.space.names)[1]
        perf = _reward(bundle.chunks, bundle.space, area_w, seed, eval_chunks)
        ensemble, history = smart_finetune(ensemble, fit_set, bundle.tokens, perf, epochs,
                                           spec.model_copy(update={"epochs": epochs}), sigma)
        after = ensemble_rank_mse(ensemble, held_set, bundle.tokens) if held_set.rows else None

    save_ensemble(ensemble, out_dir / ENSEMBLE_DIR)
    _write_csv(pd.DataFrame([h.model_dump() for h in history]), out_dir / FINETUNE_FILE)
    evaluation = [{"model": f"ensemble-{stage}", "mode": MODE_M, "metric": metric, "split": "validation",
                   "mse": value} for stage, value in (("pre", before), ("post", after)) if value is not None]
    _write_csv(pd.DataFrame(evaluation, columns=["model", "mode", "metric", "split", "mse"]),
               out_dir / EVALUATION_FILE)
    write_manifest(out_dir, "smart-finetune",
                   {"dataset": dataset_path, "space": space_path, "checkpoint": checkpoint, "metric": metric,
                    "lambda": lam, "sigma": sigma, "epochs": epochs, "pretrain_epochs": pretrain_epochs,
                    "batch_size": batch_size, "learning_rate": learning_rate, "eval_chunks": eval_chunks},
                   {"seed": seed}, [dataset_path, space_path, checkpoint, weights_path])
    if before is not None:
        console.print(f"[cyan]Held-out rank MSE {before:.6g} -> {after:.6g}[/cyan]")
    return ensemble


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def report_step(results_dir: Path, out_dir: Optional[Path] = None) -> list[Path]:
    written = report(results_dir, out_dir)
    target = written[-1].parent
    write_manifest(target, "report", {"results": results_dir, "out": out_dir}, {})
    console.print(f"[cyan]Exported {len(written)} files to {target}[/cyan]")
    return written
