"""Pydantic models for traces, design spaces, simulation results and runs."""

import math
from enum import Enum
from typing import Optional, Union
from pydantic import BaseModel, ConfigDict, Field, model_validator

U64_MAX = 2**64 - 1


class Subsystem(str, Enum):
    """Owning subsystem of a design parameter."""
    IMEM = "Imem"
    DMEM = "Dmem"
    CORE = "Core"
    BRANCH = "Branch"


class Replacement(str, Enum):
    """Cache replacement policies, in their declared ordinal order."""
    PLRU = "PLRU"
    LRU = "LRU"
    RANDOM = "RANDOM"


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

class TraceFlags(BaseModel):
    """Instruction flags C, LD, ST, BR."""
    model_config = ConfigDict(frozen=True)

    compressed: bool = False
    load: bool = False
    store: bool = False
    branch: bool = False


class TraceRecord(BaseModel):
    """One executed instruction."""
    model_config = ConfigDict(frozen=True)

    pc: int = Field(ge=0, le=U64_MAX)
    mnemonic: str = Field(min_length=1)
    flags: TraceFlags = TraceFlags()
    target: Optional[int] = Field(default=None, ge=0, le=U64_MAX)
    taken: Optional[bool] = None
    rd: Optional[int] = Field(default=None, ge=0, le=31)
    rs1: Optional[int] = Field(default=None, ge=0, le=31)
    rs2: Optional[int] = Field(default=None, ge=0, le=31)
    mem_addr: Optional[int] = Field(default=None, ge=0, le=U64_MAX)

    @model_validator(mode="after")
    def _check_flags(self) -> "TraceRecord":
        is_branch = self.flags.branch
        if is_branch and (self.target is None or self.taken is None):
            raise ValueError("branch record needs both taken and target")
        if not is_branch and (self.target is not None or self.taken is not None):
            raise ValueError("taken/target only allowed on branch records")
        is_mem = self.flags.load or self.flags.store
        if is_mem and self.mem_addr is None:
            raise ValueError("load/store record needs mem_addr")
        if not is_mem and self.mem_addr is not None:
            raise ValueError("mem_addr only allowed on load/store records")
        return self


class Chunk(BaseModel):
    """Fixed-length window of consecutive records (the last one may be short)."""
    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=0)
    records: tuple[TraceRecord, ...]

    def __len__(self) -> int:
        return len(self.records)


class WorkloadProfile(BaseModel):
    """Parameters of the synthetic trace generator."""
    alu_frac: float = Field(ge=0.0)
    mul_frac: float = Field(ge=0.0)
    div_frac: float = Field(ge=0.0)
    load_frac: float = Field(ge=0.0)
    store_frac: float = Field(ge=0.0)
    branch_frac: float = Field(ge=0.0)
    taken_prob: float = Field(ge=0.0, le=1.0)
    dep_chain_len: float = Field(ge=1.0)
    working_set_bytes: int = Field(gt=0)
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    # Share of ALU-class draws that are floating point operations
    fp_share: float = Field(default=0.1, ge=0.0, le=1.0)
    # Share of static branches that behave as counted loops
    loop_frac: float = Field(default=0.25, ge=0.0, le=1.0)
    code_bytes: int = Field(default=16384, ge=64)

    @model_validator(mode="after")
    def _check_fractions(self) -> "WorkloadProfile":
        total = sum(self.class_fractions())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"instruction class fractions sum to {total}, expected 1")
        return self

    def class_fractions(self) -> list[float]:
        """Fractions in the order alu, mul, div, load, store, branch."""
        return [self.alu_frac, self.mul_frac, self.div_frac,
                self.load_frac, self.store_frac, self.branch_frac]


# ---------------------------------------------------------------------------
# Design space
# ---------------------------------------------------------------------------

ParamValue = Union[int, float, str]


class ParamSpec(BaseModel):
    """One discrete design parameter."""
    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    subsystem: Subsystem
    values: tuple[ParamValue, ...]

    @model_validator(mode="after")
    def _check_values(self) -> "ParamSpec":
        if not self.values:
            raise ValueError(f"{self.name}: empty value list")
        numeric = [not isinstance(v, str) for v in self.values]
        if any(numeric) and not all(numeric):
            raise ValueError(f"{self.name}: mixes numeric and symbolic values")
        if all(numeric):
            for a, b in zip(self.values, self.values[1:]):
                if not a < b:
                    raise ValueError(f"{self.name}: numeric values must be strictly increasing")
        elif len(set(self.values)) != len(self.values):
            raise ValueError(f"{self.name}: duplicate symbolic value")
        return self

    @property
    def is_numeric(self) -> bool:
        return not isinstance(self.values[0], str)

    @property
    def cardinality(self) -> int:
        return len(self.values)


class DesignSpace(BaseModel):
    """Ordered catalog of parameters."""
    model_config = ConfigDict(frozen=True)

    params: tuple[ParamSpec, ...]

    @model_validator(mode="after")
    def _check_names(self) -> "DesignSpace":
        seen = set()
        for p in self.params:
            if p.name in seen:
                raise ValueError(f"duplicate parameter name: {p.name}")
            seen.add(p.name)
        return self

    def __len__(self) -> int:
        return len(self.params)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def cardinalities(self) -> list[int]:
        return [p.cardinality for p in self.params]

    def index(self, name: str) -> int:
        for i, p in enumerate(self.params):
            if p.name == name:
                return i
        raise KeyError(name)

    def param(self, name: str) -> ParamSpec:
        return self.params[self.index(name)]


class Configuration(BaseModel):
    """One point of a design space, stored as ranks."""
    model_config = ConfigDict(frozen=True)

    ranks: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ranks)


# ---------------------------------------------------------------------------
# Simulation and metrics
# ---------------------------------------------------------------------------

class SimStats(BaseModel):
    """Raw activity counters of one simulated chunk."""
    instructions: int = 0
    cycles: int = 0
    icache_hits: int = 0
    icache_misses: int = 0
    dcache_hits: int = 0
    dcache_misses: int = 0
    l2_hits: int = 0
    l2_misses: int = 0
    l3_hits: int = 0
    l3_misses: int = 0
    itlb_hits: int = 0
    itlb_misses: int = 0
    dtlb_hits: int = 0
    dtlb_misses: int = 0
    br_correct: int = 0
    br_mispredict: int = 0
    stall_cycles_frontend: int = 0
    stall_cycles_rob_full: int = 0
    stall_cycles_lsu_full: int = 0

    def counters(self) -> dict[str, int]:
        return self.model_dump()

    def __add__(self, other: "SimStats") -> "SimStats":
        a, b = self.counters(), other.counters()
        return SimStats(**{k: a[k] + b[k] for k in a})


COUNTER_NAMES: list[str] = list(SimStats.model_fields)


class CacheGeometry(BaseModel):
    """Size and policy of one cache or TLB level."""
    size_bytes: int = Field(gt=0)
    line_bytes: int = Field(gt=0)
    associativity: int = Field(gt=0)
    replacement: Replacement = Replacement.LRU
    hit_latency: int = Field(default=1, gt=0)
    miss_penalty_next_level: int = Field(default=1, gt=0)

    @model_validator(mode="after")
    def _check_shape(self) -> "CacheGeometry":
        if self.size_bytes % (self.line_bytes * self.associativity):
            raise ValueError("cache size must be divisible by line size x associativity")
        return self

    @property
    def num_sets(self) -> int:
        return self.size_bytes // (self.line_bytes * self.associativity)


class LatencyTable(BaseModel):
    """Execution latencies per instruction class, in cycles.

    Loads have no fixed entry: their latency is the dcache path.
    """
    alu: int = Field(default=1, ge=1)
    mul: int = Field(default=3, ge=1)
    div: int = Field(default=12, ge=1)
    fp: int = Field(default=4, ge=1)
    store: int = Field(default=1, ge=1)
    mispredict_flush_penalty: int = Field(default=12, ge=1)
    l2_hit: int = Field(default=12, ge=1)
    l3_hit: int = Field(default=40, ge=1)
    memory: int = Field(default=200, ge=1)
    tlb_walk: int = Field(default=30, ge=1)


class PowerWeights(BaseModel):
    """Per-event energy proxy, keyed by SimStats counter."""
    weights: dict[str, float]

    @model_validator(mode="after")
    def _check_weights(self) -> "PowerWeights":
        unknown = set(self.weights) - set(COUNTER_NAMES)
        if unknown:
            raise ValueError(f"unknown counters in power weights: {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("power weights must be non-negative")
        if not any(w > 0 for w in self.weights.values()):
            raise ValueError("at least one power weight must be positive")
        return self


class AreaWeights(BaseModel):
    """Relative size proxy per parameter plus a constant base term."""
    weights: dict[str, float]
    base: float = Field(default=1.0, gt=0.0)

    @model_validator(mode="after")
    def _check_weights(self) -> "AreaWeights":
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("area weights must be non-negative")
        return self


class MetricVector(BaseModel):
    """Metrics derived from one (chunk, configuration) simulation."""
    ipc: float = Field(ge=0.0)
    power: float = Field(ge=0.0)
    area: float = Field(gt=0.0)
    ipc_per_area: float

    @model_validator(mode="after")
    def _check_ratio(self) -> "MetricVector":
        if not math.isclose(self.ipc_per_area, self.ipc / self.area, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("ipc_per_area must equal ipc / area")
        return self


METRIC_NAMES = ["ipc", "power", "area", "objective"]


# ---------------------------------------------------------------------------
# Models and training
# ---------------------------------------------------------------------------

class ModelConfig(BaseModel):
    """Hyperparameters of a trace predictor network."""
    s: int = Field(gt=0)
    d: int = Field(gt=0)
    heads: int = Field(gt=0)
    encoder_layers: int = Field(gt=0)
    head_layers: int = Field(gt=0)
    window: int = Field(ge=0)
    vocab: int = Field(gt=0)

    @model_validator(mode="after")
    def _check_dims(self) -> "ModelConfig":
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.d % 2:
            raise ValueError("d must be even for sinusoidal positional encodings")
        if self.window > self.s:
            raise ValueError("window must not exceed s")
        return self

    @property
    def ff_dim(self) -> int:
        return 2 * self.d


class TrainSpec(BaseModel):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=0.001, gt=0.0)
    seed: int = 0
    validation_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    validation_loss: Optional[float] = None


class FinetuneRecord(BaseModel):
    """One fine-tuning batch: summed agent loss and the shared reward (None when unused)."""
    epoch: int
    batch: int
    loss: float
    reward: Optional[float] = None
    skipped: bool = False


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

class MastSpec(BaseModel):
    """Constraint sweep settings: c_k = c_i + k * c_s."""
    c_i: float
    c_s: float = Field(gt=0.0)
    patience: int = Field(default=10, ge=1)
    max_iter: int = Field(default=500, ge=1)
    delta: float = Field(default=0.01, ge=0.0)

    @model_validator(mode="after")
    def _check_budget(self) -> "MastSpec":
        if self.max_iter < self.patience:
            raise ValueError("max_iter must be >= patience")
        return self


class MastStep(BaseModel):
    step: int
    constraint: float
    ranks: tuple[int, ...]
    objective: Optional[float] = None


class CriticalReport(BaseModel):
    p: Optional[int] = None
    critical: list[str] = Field(default_factory=list)
    flexible: list[str] = Field(default_factory=list)


class MastResult(BaseModel):
    converged: bool
    config: Configuration
    n: int
    param_names: list[str]
    trajectory: list[MastStep]
    near_optimal_set: list[Configuration] = Field(default_factory=list)
    report: CriticalReport = Field(default_factory=CriticalReport)


class SearchSpec(BaseModel):
    population: int = Field(default=24, ge=2)
    iterations: int = Field(default=50, ge=1)
    tournament: int = Field(default=3, ge=1)
    crossover_rate: float = Field(default=0.9, ge=0.0, le=1.0)
    m0: float = Field(default=0.3, ge=0.0, le=1.0)
    alpha: float = Field(default=0.93, gt=0.0, lt=1.0)
    stagnation: int = Field(default=6, ge=1)
    seed: int = 0
    anneal: bool = True
    stagnation_mutation: bool = True


class HistoryPoint(BaseModel):
    iteration: int
    best_fitness: float
    calls: int
    wall_time: float


class SearchResult(BaseModel):
    algorithm: str
    best: Configuration
    fitness: float
    history: list[HistoryPoint] = Field(default_factory=list)
    calls: int = 0
    requests: int = 0


# ---------------------------------------------------------------------------
# Datasets and runs
# ---------------------------------------------------------------------------

class ChunkSource(BaseModel):
    """Where a dataset chunk comes from: trace file and chunk index within it."""
    chunk_id: int
    trace: str
    index: int
    instructions: int
    workload: str = ""


class DatasetRow(BaseModel):
    chunk_id: int
    config_index: int
    ranks: tuple[int, ...]
    metrics: MetricVector
    counters: dict[str, int] = Field(default_factory=dict)


class DatasetHeader(BaseModel):
    version: str = "1.1"
    space_fingerprint: str
    dictionary_fingerprint: str
    s: int
    param_names: list[str]
    dictionary: list[str] = Field(default_factory=list)
    metric_names: list[str] = Field(default_factory=lambda: list(METRIC_NAMES))
    counter_names: list[str] = Field(default_factory=lambda: list(COUNTER_NAMES))
    chunk_sources: list[ChunkSource] = Field(default_factory=list)
    failures: int = 0
    seed: int = 0


class Dataset(BaseModel):
    header: DatasetHeader
    rows: list[DatasetRow] = Field(default_factory=list)

    def chunk_ids(self) -> list[int]:
        return sorted({r.chunk_id for r in self.rows})


class RunManifest(BaseModel):
    """Everything needed to re-run a CLI subcommand."""
    command: str
    arguments: dict[str, str] = Field(default_factory=dict)
    seeds: dict[str, int] = Field(default_factory=dict)
    versions: dict[str, str] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    created_at: str
