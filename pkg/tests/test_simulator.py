"""Tests for the trace-driven out-of-order simulator."""

import math

import numpy as np
import pytest

from cpudse.errors import SimulationError
from cpudse.modules.design_space import baseline_config, sample_config
from cpudse.modules.simulator import format_stats, resolve_values, simulate, stats_row
from cpudse.modules.trace import PRESET_PROFILES, chunk_trace, generate_synthetic_trace
from cpudse.schemas import COUNTER_NAMES, Chunk, Configuration, SimStats


@pytest.fixture(scope="module")
def workload_chunks():
    out = []
    for name in ("compute", "memory", "branchy"):
        out.extend(chunk_trace(generate_synthetic_trace(PRESET_PROFILES[name], 64), 64))
    return out


def test_empty_chunk_is_rejected(catalog):
    with pytest.raises(SimulationError):
        simulate(Chunk(id=0, records=()), baseline_config(catalog), catalog)


def test_counts_every_instruction(chunks, catalog):
    stats = simulate(chunks[0], baseline_config(catalog), catalog)
    assert stats.instructions == len(chunks[0])
    assert stats.cycles >= 1


def test_ipc_bounded_by_issue_width(workload_chunks, catalog):
    rng = np.random.default_rng(0)
    for chunk in workload_chunks:
        cfg = sample_config(catalog, rng)
        stats = simulate(chunk, cfg, catalog)
        width = int(resolve_values(cfg, catalog)["issue width"])
        assert stats.instructions / stats.cycles <= width
        assert stats.cycles >= math.ceil(stats.instructions / width)


def test_cache_counters_are_consistent(workload_chunks, catalog):
    for chunk in workload_chunks:
        stats = simulate(chunk, baseline_config(catalog), catalog)
        branches = sum(r.flags.branch for r in chunk.records)
        assert stats.br_correct + stats.br_mispredict == branches
        assert all(v >= 0 for v in stats.counters().values())


def test_bit_reproducible(workload_chunks, catalog):
    rng = np.random.default_rng(7)
    cfg = sample_config(catalog, rng)
    for chunk in workload_chunks:
        assert simulate(chunk, cfg, catalog, seed=3) == simulate(chunk, cfg, catalog, seed=3)


def test_sub_space_uses_baseline_for_the_rest(chunks, catalog, toy_space):
    toy = baseline_config(toy_space)
    assert simulate(chunks[0], toy, toy_space) == simulate(chunks[0], baseline_config(catalog), catalog)


def test_bigger_icache_does_not_miss_more(catalog, toy_space):
    trace = generate_synthetic_trace(PRESET_PROFILES["branchy"], 256)
    chunk = chunk_trace(trace, 256)[0]
    low = simulate(chunk, Configuration(ranks=(1, 0, 3)), toy_space, warm=False)
    high = simulate(chunk, Configuration(ranks=(1, 5, 3)), toy_space, warm=False)
    assert high.icache_misses <= low.icache_misses


def test_stats_helpers(chunks, catalog):
    stats = simulate(chunks[0], baseline_config(catalog), catalog)
    text = format_stats(stats)
    assert text.splitlines()[0] == f"instructions={stats.instructions}"
    assert len(text.splitlines()) == len(COUNTER_NAMES)
    row = stats_row(stats, chunk=0)
    assert row["chunk"] == 0 and row["cycles"] == stats.cycles


def test_stats_add():
    a = SimStats(instructions=3, cycles=5)
    b = SimStats(instructions=2, cycles=1, l2_hits=4)
    total = a + b
    assert (total.instructions, total.cycles, total.l2_hits) == (5, 6, 4)
