"""IPC, power and area proxies and the search objective."""

from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from cpudse.errors import ConfigurationError
from cpudse.modules.design_space import default_space, validate_config
from cpudse.schemas import (
    COUNTER_NAMES,
    METRIC_NAMES,
    AreaWeights,
    Configuration,
    DesignSpace,
    MetricVector,
    PowerWeights,
    SimStats,
)

# Per-event energy proxy: a miss costs 10x the matching hit
DEFAULT_POWER_WEIGHTS = PowerWeights(weights={
    "instructions": 1.0,
    "cycles": 0.2,
    "icache_hits": 0.5,
    "icache_misses": 5.0,
    "dcache_hits": 0.5,
    "dcache_misses": 5.0,
    "l2_hits": 1.0,
    "l2_misses": 10.0,
    "l3_hits": 2.0,
    "l3_misses": 20.0,
    "itlb_hits": 0.1,
    "itlb_misses": 1.0,
    "dtlb_hits": 0.1,
    "dtlb_misses": 1.0,
    "br_correct": 0.2,
    "br_mispredict": 2.0,
})

# Relative size per unit of raw parameter value (symbolic parameters count their rank)
DEFAULT_AREA_WEIGHTS = AreaWeights(base=1.0, weights={
    "immu/il2mmu tlb page size (kb)": 0.0,
    "immu/il2mmu tlb num entries": 1e-3,
    "immu/il2mmu tlb associativity": 1e-3,
    "icache line size": 1e-4,
    "icache size (kb)": 1e-3,
    "icache associativity": 2e-3,
    "fetch-icache queue size (bytes)": 1e-4,
    "l2-icache request queue size": 2e-4,
    "l2-icache response queue size": 2e-4,
    "l2 cache line size": 5e-5,
    "l2 cache size (kb)": 2.5e-4,
    "l2 cache associativity": 1e-3,
    "l2 cache replacement policy": 5e-3,
    "l3 cache line size": 2e-5,
    "l3 cache size (kb)": 2e-5,
    "l3 cache associativity": 5e-4,
    "l3 cache replacement policy": 5e-3,
    "dcache line size": 1e-4,
    "dcache size (kb)": 1e-3,
    "dcache associativity": 2e-3,
    "dcache replacement policy": 5e-3,
    "dmmu/dl2mmu tlb page size (kb)": 0.0,
    "dmmu/dl2mmu tlb num entries": 1e-3,
    "dmmu/dl2mmu tlb associativity": 1e-3,
    "lsu data bank queue size": 5e-4,
    "lsu load buffer queue size": 5e-4,
    "lsu store buffer queue size": 5e-4,
    "lsu tlb miss queue size": 2e-4,
    "lsu memory request queue size": 2e-4,
    "lsu data miss queue size": 5e-4,
    "lsu data eviction queue size": 2e-4,
    "l2-lsu read request queue size": 2e-4,
    "l2-lsu write request queue size": 2e-4,
    "l2-lsu read response queue size": 2e-4,
    "l2-l1 pipe read request queue size": 2e-4,
    "l2 no. of banks": 1e-3,
    "l2 no. of rows per bank": 1e-3,
    "issue width": 2e-2,
    "dispatch width": 1.5e-2,
    "physical register file write ports": 1e-2,
    "physical register file read ports": 4e-3,
    "no. to fetch": 3e-3,
    "no. to decode": 3e-3,
    "decode: scalar instruction queue size": 5e-4,
    "no. to rename": 3e-3,
    "no. of integer renames": 5e-4,
    "no. of float renames": 5e-4,
    "no. to dispatch": 3e-3,
    "dispatch queue depth": 4e-3,
    "bus interface unit request queue size": 2e-4,
    "reorder buffer no. to retire": 1e-3,
    "reorder buffer retire queue depth": 4e-4,
    "loop predictor (lpred) no. of entries": 2e-5,
    "lpred associativity": 1e-3,
    "lpred max age": 1e-4,
    "lpred no. of loop iterations max": 1e-5,
    "tage instruction shift amount": 0.0,
    "tage history buffer size": 1e-4,
    "tage initial reset timer value": 0.0,
    "tage path history bits": 1e-4,
    "tage table tag widths x16": 2e-3,
    "ittage path history bits": 1e-4,
    "ittage initial reset timer value": 0.0,
    "ittage table tag widths x16": 2e-3,
    "branch target buffer (btb) granularity": 0.0,
    "btb total entries": 2e-5,
    "btb associativity": 1e-3,
    "btb raas size": 1e-4,
})


def compute_ipc(stats: SimStats) -> float:
    if stats.instructions == 0:
        return 0.0
    if stats.cycles < 1:
        raise ValueError("IPC needs at least one cycle")
    return stats.instructions / stats.cycles


def weighted_activity(stats: SimStats, weights: PowerWeights) -> float:
    """Un-normalised weighted counter sum (linear in stats)."""
    counters = stats.counters()
    return float(sum(w * counters[name] for name, w in weights.weights.items()))


def estimate_power(stats: SimStats, weights: PowerWeights = DEFAULT_POWER_WEIGHTS) -> float:
    """Weighted activity per instruction."""
    if stats.instructions == 0:
        return 0.0
    return weighted_activity(stats, weights) / stats.instructions


def estimate_area(config: Configuration, space: DesignSpace,
                  weights: AreaWeights = DEFAULT_AREA_WEIGHTS) -> float:
    validate_config(config, space)
    area = weights.base
    for rank, p in zip(config.ranks, space.params):
        w = weights.weights.get(p.name, 0.0)
        if w:
            area += w * (p.values[rank] if p.is_numeric else rank)
    return float(area)


def objective(stats: SimStats, config: Configuration, space: DesignSpace,
              weights: AreaWeights = DEFAULT_AREA_WEIGHTS) -> float:
    """IPC per unit area."""
    return compute_ipc(stats) / estimate_area(config, space, weights)


def metric_value(metrics: MetricVector, name: str) -> float:
    """Select one metric by name; "objective" is IPC per area."""
    if name == "objective":
        return metrics.ipc_per_area
    if name not in ("ipc", "power", "area"):
        raise ConfigurationError(f"Unknown metric '{name}' (expected one of {METRIC_NAMES})")
    return getattr(metrics, name)


def compute_metrics(stats: SimStats, config: Configuration, space: DesignSpace,
                    power_weights: PowerWeights = DEFAULT_POWER_WEIGHTS,
                    area_weights: AreaWeights = DEFAULT_AREA_WEIGHTS) -> MetricVector:
    ipc = compute_ipc(stats)
    area = estimate_area(config, space, area_weights)
    return MetricVector(ipc=ipc, power=estimate_power(stats, power_weights),
                        area=area, ipc_per_area=ipc / area)


# ---------------------------------------------------------------------------
# Weights file
# ---------------------------------------------------------------------------

def parse_weights(text: str, param_names: Optional[Sequence[str]] = None) -> tuple[PowerWeights, AreaWeights]:
    """
    Parse `key = weight` lines.

    Counter names set power weights, `base` sets the area base term and a
    parameter name (built-in catalog or `param_names`) sets that parameter's
    area weight. Any other key is an error. Keys not given keep their defaults.
    """
    known_params = set(default_space().names) | set(DEFAULT_AREA_WEIGHTS.weights) | set(param_names or ())
    power = dict(DEFAULT_POWER_WEIGHTS.weights)
    area = dict(DEFAULT_AREA_WEIGHTS.weights)
    base = DEFAULT_AREA_WEIGHTS.base

    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.rpartition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"weights line {line_no}: expected 'name = weight'")
        try:
            weight = float(value)
        except ValueError:
            raise ConfigurationError(f"weights line {line_no}: bad weight '{value.strip()}'")
        if key == "base":
            base = weight
        elif key in COUNTER_NAMES:
            power[key] = weight
        elif key in known_params:
            area[key] = weight
        else:
            raise ConfigurationError(f"weights line {line_no}: unknown counter or parameter '{key}'")

    try:
        return PowerWeights(weights=power), AreaWeights(weights=area, base=base)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid weights: {e.errors()[0]['msg']}")


def dump_weights(power: PowerWeights = DEFAULT_POWER_WEIGHTS,
                 area: AreaWeights = DEFAULT_AREA_WEIGHTS) -> str:
    lines = ["# power weights (per event)"]
    lines += [f"{k} = {v!r}" for k, v in power.weights.items()]
    lines += ["", "# area weights (per unit of parameter value)", f"base = {area.base!r}"]
    lines += [f"{k} = {v!r}" for k, v in area.weights.items()]
    return "\n".join(lines) + "\n"


def load_weights(path: Optional[Path] = None,
                 param_names: Optional[Sequence[str]] = None) -> tuple[PowerWeights, AreaWeights]:
    if path is None:
        return DEFAULT_POWER_WEIGHTS, DEFAULT_AREA_WEIGHTS
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Weights file not found: {path}")
    return parse_weights(path.read_text(encoding="utf-8"), param_names)
