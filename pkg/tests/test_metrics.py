"""Tests for IPC, power and area estimation and the weights file."""

import pytest

from cpudse.errors import ConfigurationError
from cpudse.modules.design_space import baseline_config
from cpudse.modules.metrics import (
    DEFAULT_AREA_WEIGHTS,
    DEFAULT_POWER_WEIGHTS,
    compute_ipc,
    compute_metrics,
    dump_weights,
    estimate_area,
    estimate_power,
    load_weights,
    metric_value,
    objective,
    parse_weights,
    weighted_activity,
)
from cpudse.schemas import Configuration, SimStats


def test_ipc():
    assert compute_ipc(SimStats(instructions=8, cycles=4)) == 2.0
    assert compute_ipc(SimStats()) == 0.0
    with pytest.raises(ValueError):
        compute_ipc(SimStats(instructions=3, cycles=0))


def test_activity_is_linear_in_counters():
    a = SimStats(instructions=10, cycles=20, dcache_hits=4, l2_misses=1, br_mispredict=2)
    b = SimStats(instructions=6, cycles=9, dcache_hits=1, icache_misses=3)
    total = weighted_activity(a + b, DEFAULT_POWER_WEIGHTS)
    parts = weighted_activity(a, DEFAULT_POWER_WEIGHTS) + weighted_activity(b, DEFAULT_POWER_WEIGHTS)
    assert total == pytest.approx(parts)
    assert estimate_power(a + b) == pytest.approx(total / 16)


def test_power_of_empty_stats_is_zero():
    assert estimate_power(SimStats()) == 0.0


def test_area_grows_with_cache_size(toy_space):
    small = estimate_area(Configuration(ranks=(1, 0, 1)), toy_space)
    large = estimate_area(Configuration(ranks=(1, 5, 1)), toy_space)
    assert large > small >= DEFAULT_AREA_WEIGHTS.base


def test_objective_is_ipc_per_area(toy_space):
    stats = SimStats(instructions=12, cycles=8)
    cfg = baseline_config(toy_space)
    assert objective(stats, cfg, toy_space) == pytest.approx(1.5 / estimate_area(cfg, toy_space))
    metrics = compute_metrics(stats, cfg, toy_space)
    assert metric_value(metrics, "objective") == pytest.approx(metrics.ipc / metrics.area)
    assert metric_value(metrics, "ipc") == 1.5
    with pytest.raises(ConfigurationError):
        metric_value(metrics, "latency")


def test_weights_text_inverse():
    power, area = parse_weights(dump_weights())
    assert power == DEFAULT_POWER_WEIGHTS
    assert area == DEFAULT_AREA_WEIGHTS


def test_weights_overrides():
    power, area = parse_weights("dcache_misses = 9.5  # costly\nbase = 3\nicache size (kb) = 0.5\n")
    assert power.weights["dcache_misses"] == 9.5
    assert area.base == 3.0
    assert area.weights["icache size (kb)"] == 0.5


def test_weights_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        parse_weights("dcache_misses 3")
    with pytest.raises(ConfigurationError):
        parse_weights("dcache_misses = lots")
    with pytest.raises(ConfigurationError):
        parse_weights("dcache_misses = -1")
    with pytest.raises(ConfigurationError):
        load_weights(tmp_path / "absent.txt")
    assert load_weights() == (DEFAULT_POWER_WEIGHTS, DEFAULT_AREA_WEIGHTS)


def test_weights_reject_unknown_keys(tmp_path):
    with pytest.raises(ConfigurationError, match="dcache_miss"):
        parse_weights("dcache_miss = 2.0\n")
    with pytest.raises(ConfigurationError):
        parse_weights("vector width = 1.0\n")
    _, area = parse_weights("vector width = 1.0\n", param_names=["vector width"])
    assert area.weights["vector width"] == 1.0
    path = tmp_path / "weights.txt"
    path.write_text("vector width = 1.0\n")
    assert load_weights(path, ["vector width"])[1].weights["vector width"] == 1.0
