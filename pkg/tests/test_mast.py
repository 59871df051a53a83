"""Tests for the metric-space constraint sweep."""

import numpy as np
import pytest
from pydantic import ValidationError

from cpudse.errors import SearchError
from cpudse.modules.mast import annotate, critical_parameters, default_spec, default_step, mast_search
from cpudse.modules.trace_models import MODE_M, MODE_P, init_model
from cpudse.schemas import Configuration, MastSpec, MastStep


@pytest.fixture
def ramp_model(toy_space, dictionary, tiny_config):
    """Parameters-only M model whose raw ranks all equal the constraint."""
    model = init_model(MODE_M, toy_space, dictionary, tiny_config, trace_aware=False)
    d = tiny_config.d
    model.params["head0.w"] = np.ones((1, d))
    model.params["head1.w"] = np.eye(d)
    last = np.zeros((d, len(toy_space)))
    last[0] = 1.0 / model.rank_scale
    model.params["head2.w"] = last
    return model


def test_default_step_and_spec():
    assert default_step([1.0, 3.0], steps=4) == 0.5
    assert default_step([2.0, 2.0]) > 0
    spec = default_spec([1.0, 3.0], patience=5, c_s=None)
    assert spec.c_i == 1.0
    assert spec.patience == 5
    assert spec.c_s == default_step([1.0, 3.0])
    with pytest.raises(SearchError):
        default_step([])


def test_spec_validation():
    with pytest.raises(ValidationError):
        MastSpec(c_i=0.0, c_s=0.0)
    with pytest.raises(ValidationError):
        MastSpec(c_i=0.0, c_s=1.0, patience=10, max_iter=5)


def test_untrained_model_converges_after_patience(toy_space, dictionary, tiny_config, tokens_by_chunk):
    model = init_model(MODE_M, toy_space, dictionary, tiny_config)
    result = mast_search(model, list(tokens_by_chunk.values()), MastSpec(c_i=0.0, c_s=1.0, patience=3))
    assert result.converged
    assert result.n == 2
    assert result.config == Configuration(ranks=(0, 0, 0))
    assert [s.constraint for s in result.trajectory] == [0.0, 1.0, 2.0]


def test_sweep_settles_on_the_largest_configuration(ramp_model, tokens_by_chunk):
    tokens = list(tokens_by_chunk.values())
    result = mast_search(ramp_model, tokens, MastSpec(c_i=0.0, c_s=0.4, patience=4, max_iter=100))
    assert result.converged
    assert result.n == 15
    assert result.config.ranks == (1, 5, 3)
    assert result.trajectory[4].ranks == (1, 2, 2)
    assert result.param_names == ramp_model.space.names


def test_unconverged_sweep_stops_at_max_iter(ramp_model, tokens_by_chunk):
    result = mast_search(ramp_model, [tokens_by_chunk[0]], MastSpec(c_i=0.0, c_s=0.4, patience=4, max_iter=6))
    assert not result.converged
    assert result.n == 5
    assert result.near_optimal_set == []


def test_oracle_marks_critical_parameter(ramp_model, tokens_by_chunk):
    calls = []

    def oracle(cfg):
        calls.append(cfg.ranks)
        return float(sum(cfg.ranks))

    spec = MastSpec(c_i=0.0, c_s=0.4, patience=4, max_iter=100, delta=0.01)
    result = mast_search(ramp_model, [tokens_by_chunk[0]], spec, oracle=oracle)
    assert len(calls) == len(set(calls))
    assert all(s.objective == sum(s.ranks) for s in result.trajectory)
    assert result.report.p == 12
    assert result.report.critical == ["icache size (kb)"]
    assert result.report.flexible == []
    assert result.near_optimal_set == [Configuration(ranks=(1, 5, 3))]


def test_search_rejects_wrong_inputs(toy_space, dictionary, tiny_config, tokens_by_chunk):
    p_model = init_model(MODE_P, toy_space, dictionary, tiny_config)
    with pytest.raises(SearchError):
        mast_search(p_model, [tokens_by_chunk[0]], MastSpec(c_i=0.0, c_s=1.0, patience=1))
    m_model = init_model(MODE_M, toy_space, dictionary, tiny_config)
    with pytest.raises(SearchError):
        mast_search(m_model, [], MastSpec(c_i=0.0, c_s=1.0, patience=1))


def test_critical_parameters_flexible_tail():
    names = ["a", "b", "c"]
    trajectory = [
        MastStep(step=0, constraint=0.0, ranks=(0, 0, 0), objective=1.0),
        MastStep(step=1, constraint=1.0, ranks=(1, 0, 0), objective=2.0),
        MastStep(step=2, constraint=2.0, ranks=(1, 0, 1), objective=2.0),
        MastStep(step=3, constraint=3.0, ranks=(1, 0, 2), objective=2.001),
    ]
    report = critical_parameters(trajectory, 0.01, names)
    assert report.p == 1
    assert report.critical == ["a"]
    assert report.flexible == ["c"]
    assert critical_parameters(trajectory[:1], 0.01, names).p is None


def test_annotate_reuses_oracle_values():
    steps = [MastStep(step=i, constraint=float(i), ranks=(i % 2,)) for i in range(4)]
    seen = []
    annotated = annotate(steps, lambda cfg: seen.append(cfg) or 7.0)
    assert len(seen) == 2
    assert all(s.objective == 7.0 for s in annotated)
