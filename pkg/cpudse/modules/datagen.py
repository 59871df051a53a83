"""Dataset building, splitting and persistence (CSV rows + JSON manifest)."""

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from cpudse import config
from cpudse.console import warn
from cpudse.errors import DatasetError, SimulationError
from cpudse.modules.design_space import dump_design_space, validate_config
from cpudse.modules.fingerprint import canonical_json, fingerprint, sha1_text
from cpudse.modules.metrics import (
    DEFAULT_AREA_WEIGHTS,
    DEFAULT_POWER_WEIGHTS,
    compute_metrics,
)
from cpudse.modules.simulator import simulate
from cpudse.modules.trace import TokenDict, chunk_trace, parse_trace
from cpudse.schemas import (
    COUNTER_NAMES,
    AreaWeights,
    Chunk,
    ChunkSource,
    Configuration,
    Dataset,
    DatasetHeader,
    DatasetRow,
    DesignSpace,
    MetricVector,
    PowerWeights,
    SimStats,
)

FORMAT_VERSION = "1.1"
SUPPORTED_VERSIONS = ("1.0", "1.1")
METRIC_COLUMNS = ["ipc", "power", "area", "objective"]

Simulator = Callable[..., SimStats]


def space_fingerprint(space: DesignSpace) -> str:
    return fingerprint(dump_design_space(space))


def dictionary_fingerprint(dictionary: TokenDict) -> str:
    return fingerprint(list(dictionary.mnemonics))


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------

def _simulate_chunk(chunk: Chunk, configs: Sequence[Configuration], space: DesignSpace, seed: int,
                    simulator: Simulator) -> list[tuple[int, Optional[SimStats], str]]:
    results = []
    for index, cfg in enumerate(configs):
        try:
            results.append((index, simulator(chunk, cfg, space, seed=seed), ""))
        except SimulationError as e:
            results.append((index, None, str(e)))
    return results


def _run_grid(chunks: Sequence[Chunk], configs: Sequence[Configuration], space: DesignSpace,
              seed: int, simulator: Simulator, on_chunk: Optional[Callable[[int], None]]) -> list:
    if config.THREADS > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=config.THREADS) as pool:
            futures = [pool.submit(_simulate_chunk, c, configs, space, seed, simulator) for c in chunks]
            results = []
            for chunk, future in zip(chunks, futures):
                results.append((chunk, future.result()))
                if on_chunk is not None:
                    on_chunk(chunk.id)
            return results

    results = []
    for chunk in chunks:
        results.append((chunk, _simulate_chunk(chunk, configs, space, seed, simulator)))
        if on_chunk is not None:
            on_chunk(chunk.id)
    return results


def build_dataset(chunks: Sequence[Chunk], configs: Sequence[Configuration], space: DesignSpace,
                  dictionary: TokenDict, s: int,
                  power_weights: PowerWeights = DEFAULT_POWER_WEIGHTS,
                  area_weights: AreaWeights = DEFAULT_AREA_WEIGHTS,
                  seed: int = 0,
                  chunk_sources: Optional[Sequence[ChunkSource]] = None,
                  simulator: Simulator = simulate,
                  on_chunk: Optional[Callable[[int], None]] = None) -> Dataset:
    """
    Simulate every (chunk, configuration) pair.

    Pairs whose simulation fails are left out and counted in header.failures.
    Rows are sorted by (chunk_id, config_index) whatever the worker count.
    """
    for cfg in configs:
        validate_config(cfg, space)
    ids = [c.id for c in chunks]
    if len(set(ids)) != len(ids):
        raise DatasetError("chunk ids must be unique within a dataset")

    rows: list[DatasetRow] = []
    failures = 0
    for chunk, results in _run_grid(chunks, configs, space, seed, simulator, on_chunk):
        for index, stats, error in results:
            if stats is None:
                failures += 1
                warn(f"chunk {chunk.id} x config {index} failed: {error}")
                continue
            metrics = compute_metrics(stats, configs[index], space, power_weights, area_weights)
            rows.append(DatasetRow(chunk_id=chunk.id, config_index=index, ranks=configs[index].ranks,
                                   metrics=metrics, counters=stats.counters()))
    rows.sort(key=lambda r: (r.chunk_id, r.config_index))

    header = DatasetHeader(
        version=FORMAT_VERSION,
        space_fingerprint=space_fingerprint(space),
        dictionary_fingerprint=dictionary_fingerprint(dictionary),
        s=s,
        param_names=space.names,
        dictionary=list(dictionary.mnemonics),
        chunk_sources=list(chunk_sources or []),
        failures=failures,
        seed=seed,
    )
    return Dataset(header=header, rows=rows)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _subset(dataset: Dataset, chunk_ids: set[int]) -> Dataset:
    header = dataset.header.model_copy(update={
        "chunk_sources": [c for c in dataset.header.chunk_sources if c.chunk_id in chunk_ids],
    })
    return Dataset(header=header, rows=[r for r in dataset.rows if r.chunk_id in chunk_ids])


def split(dataset: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """
    Chunk-stratified split: `fraction` of the chunks (rounded, at least one on
    each side when there are two or more) go to the first half.
    """
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"split fraction must be in (0, 1), got {fraction}")
    chunk_ids = np.array(dataset.chunk_ids(), dtype=np.int64)
    order = np.random.default_rng(seed).permutation(chunk_ids)
    n = len(order)
    n_train = n if n < 2 else min(max(int(round(fraction * n)), 1), n - 1)
    train_ids = {int(c) for c in order[:n_train]}
    valid_ids = {int(c) for c in order[n_train:]}
    return _subset(dataset, train_ids), _subset(dataset, valid_ids)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def manifest_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def header_digest(header: dict) -> str:
    return sha1_text(canonical_json(header))


def to_frame(dataset: Dataset) -> pd.DataFrame:
    k = len(dataset.header.param_names)
    records = []
    for r in dataset.rows:
        record = {"chunk_id": r.chunk_id, "config_index": r.config_index}
        record.update({f"rank_{i}": r.ranks[i] for i in range(k)})
        m = r.metrics
        record.update({"ipc": m.ipc, "power": m.power, "area": m.area, "objective": m.ipc_per_area})
        record.update({name: r.counters.get(name, 0) for name in dataset.header.counter_names})
        records.append(record)
    columns = (["chunk_id", "config_index"] + [f"rank_{i}" for i in range(k)]
               + METRIC_COLUMNS + list(dataset.header.counter_names))
    return pd.DataFrame.from_records(records, columns=columns)


def save_dataset(dataset: Dataset, path: Path) -> Path:
    """Write `<path>` (CSV rows) and `<stem>.manifest.json` (header + digest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_frame(dataset).to_csv(path, index=False, lineterminator="\n")

    header = dataset.header.model_dump(mode="json")
    manifest = {"header": header, "header_digest": header_digest(header)}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(path: Path, space: Optional[DesignSpace] = None,
                 dictionary: Optional[TokenDict] = None) -> Dataset:
    """
    Load a dataset and verify its manifest.

    Raises DatasetError when the manifest digest does not match its header or
    when the given space/dictionary do not match the recorded fingerprints.
    """
    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists():
        raise DatasetError(f"Dataset not found: {path}")
    if not mpath.exists():
        raise DatasetError(f"Dataset manifest not found: {mpath}")

    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        raw_header = manifest["header"]
        digest = manifest["header_digest"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"Unreadable dataset manifest {mpath}: {e}")
    if header_digest(raw_header) != digest:
        raise DatasetError(f"Dataset header of {path} does not match its digest (file was modified)")

    try:
        header = DatasetHeader(**raw_header)
    except ValidationError as e:
        raise DatasetError(f"Invalid dataset header in {mpath}: {e.errors()[0]['msg']}")
    if header.version not in SUPPORTED_VERSIONS:
        raise DatasetError(f"Unsupported dataset version {header.version} (supported: {SUPPORTED_VERSIONS})")

    if space is not None and space_fingerprint(space) != header.space_fingerprint:
        raise DatasetError(f"Dataset {path} was built for a different design space")
    if dictionary is not None and dictionary_fingerprint(dictionary) != header.dictionary_fingerprint:
        raise DatasetError(f"Dataset {path} was built with a different token dictionary")

    frame = pd.read_csv(path, float_precision="round_trip")
    k = len(header.param_names)
    rank_cols = [f"rank_{i}" for i in range(k)]
    missing = [c for c in ["chunk_id", "config_index"] + rank_cols + METRIC_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError(f"Dataset {path} is missing column '{missing[0]}'")

    if header.version == "1.0":
        header = header.model_copy(update={"counter_names": list(COUNTER_NAMES)})
    counter_cols = [c for c in header.counter_names if c in frame.columns]

    rows = []
    for rec in frame.to_dict(orient="records"):
        try:
            metrics = MetricVector(ipc=rec["ipc"], power=rec["power"], area=rec["area"],
                                   ipc_per_area=rec["objective"])
        except ValidationError as e:
            raise DatasetError(f"Dataset {path}, chunk {rec['chunk_id']}: {e.errors()[0]['msg']}")
        counters = {name: int(rec[name]) if name in counter_cols else 0 for name in header.counter_names}
        rows.append(DatasetRow(chunk_id=int(rec["chunk_id"]), config_index=int(rec["config_index"]),
                               ranks=tuple(int(rec[c]) for c in rank_cols), metrics=metrics,
                               counters=counters))
    return Dataset(header=header, rows=rows)


# ---------------------------------------------------------------------------
# Chunks behind a dataset
# ---------------------------------------------------------------------------

def load_chunks(header: DatasetHeader, base_dir: Optional[Path] = None) -> dict[int, Chunk]:
    """Re-read the chunks a dataset was built from (chunk id -> Chunk)."""
    by_trace: dict[str, list[ChunkSource]] = {}
    for source in header.chunk_sources:
        by_trace.setdefault(source.trace, []).append(source)

    chunks: dict[int, Chunk] = {}
    for trace, sources in by_trace.items():
        path = Path(trace)
        if not path.exists() and base_dir is not None:
            path = Path(base_dir) / trace
        if not path.exists():
            raise DatasetError(f"Trace file of dataset not found: {trace}")
        pieces = chunk_trace(parse_trace(path.read_text(encoding="utf-8")), header.s)
        for source in sources:
            if source.index >= len(pieces):
                raise DatasetError(f"{trace} has no chunk {source.index}")
            piece = pieces[source.index]
            chunks[source.chunk_id] = Chunk(id=source.chunk_id, records=piece.records)
    return chunks
