"""Tests for the subsystem agent ensemble and joint fine-tuning."""

import numpy as np
import pytest

from cpudse.errors import ConfigurationError, ModelError, SimulationError
from cpudse.modules.datagen import build_dataset
from cpudse.modules.design_space import sample_config, select_params
from cpudse.modules.smart import (
    AgentEnsemble,
    build_ensemble,
    ensemble_rank_mse,
    independent_finetune,
    joint_predict,
    load_ensemble,
    save_ensemble,
    smart_finetune,
)
from cpudse.modules.trace_models import MODE_P, init_model
from cpudse.schemas import TrainSpec

from tests.conftest import TINY_S

MIXED_PARAMS = ["icache size (kb)", "dcache size (kb)", "btb total entries"]


@pytest.fixture(scope="module")
def mixed_space(catalog):
    return select_params(catalog, MIXED_PARAMS)


@pytest.fixture(scope="module")
def mixed_dataset(mixed_space, chunks, dictionary):
    rng = np.random.default_rng(5)
    configs = [sample_config(mixed_space, rng) for _ in range(4)]
    return build_dataset(chunks, configs, mixed_space, dictionary, TINY_S)


def _ensemble(mixed_space, dictionary, tiny_config, lam=0.0):
    return build_ensemble(mixed_space, dictionary, tiny_config, lam=lam, seed=9)


def test_one_agent_per_subsystem(mixed_space, dictionary, tiny_config):
    ensemble = _ensemble(mixed_space, dictionary, tiny_config)
    assert sorted(ensemble.agents) == ["Branch", "Dmem", "Imem"]
    assert ensemble.agents["Dmem"].space.names == ["dcache size (kb)"]


def test_partition_is_checked(mixed_space, dictionary, tiny_config):
    ensemble = _ensemble(mixed_space, dictionary, tiny_config)
    agents = dict(ensemble.agents)
    with pytest.raises(ConfigurationError):
        AgentEnsemble(space=mixed_space, agents={**agents, "Core": agents["Imem"]})
    del agents["Branch"]
    with pytest.raises(ConfigurationError):
        AgentEnsemble(space=mixed_space, agents=agents)
    p_agent = init_model(MODE_P, ensemble.agents["Imem"].space, dictionary, tiny_config)
    with pytest.raises(ModelError):
        AgentEnsemble(space=mixed_space, agents={**ensemble.agents, "Imem": p_agent})
    with pytest.raises(ConfigurationError):
        AgentEnsemble(space=mixed_space, agents=ensemble.agents, lam=-1.0)


def test_joint_prediction_merges_parts(mixed_space, dictionary, tiny_config, tokens_by_chunk):
    ensemble = _ensemble(mixed_space, dictionary, tiny_config)
    cfg = joint_predict(ensemble, list(tokens_by_chunk.values()), 1.0)
    assert cfg.ranks == (0, 0, 0)


def test_zero_lambda_matches_independent_finetuning(mixed_space, mixed_dataset, dictionary, tiny_config,
                                                    tokens_by_chunk):
    spec = TrainSpec(batch_size=4, learning_rate=0.01, seed=4)
    joint, joint_history = smart_finetune(_ensemble(mixed_space, dictionary, tiny_config), mixed_dataset,
                                          tokens_by_chunk, None, epochs=2, spec=spec)
    alone, alone_history = independent_finetune(_ensemble(mixed_space, dictionary, tiny_config), mixed_dataset,
                                                tokens_by_chunk, epochs=2, spec=spec)
    for tag in joint.agents:
        for name, value in joint.agents[tag].params.items():
            assert np.array_equal(value, alone.agents[tag].params[name])
    assert [r.loss for r in joint_history] == [r.loss for r in alone_history]
    assert all(r.reward is None for r in joint_history)


def test_reward_needs_a_function(mixed_space, mixed_dataset, dictionary, tiny_config, tokens_by_chunk):
    with pytest.raises(ModelError):
        smart_finetune(_ensemble(mixed_space, dictionary, tiny_config, lam=0.5), mixed_dataset,
                       tokens_by_chunk, None)


def test_reward_is_recorded(mixed_space, mixed_dataset, dictionary, tiny_config, tokens_by_chunk):
    calls = []

    def perf(cfg, chunk_ids):
        calls.append((cfg, tuple(chunk_ids)))
        return float(sum(cfg.ranks))

    ensemble = _ensemble(mixed_space, dictionary, tiny_config, lam=0.5)
    ensemble, history = smart_finetune(ensemble, mixed_dataset, tokens_by_chunk, perf,
                                       spec=TrainSpec(batch_size=8, seed=1))
    assert len(history) == len(calls) == 2
    assert all(r.reward is not None and not r.skipped for r in history)
    assert all(len(ids) >= 1 for _, ids in calls)
    assert ensemble.baseline is not None


def test_failed_reward_skips_batch(mixed_space, mixed_dataset, dictionary, tiny_config, tokens_by_chunk):
    def perf(cfg, chunk_ids):
        raise SimulationError("no cycles left")

    ensemble = _ensemble(mixed_space, dictionary, tiny_config, lam=0.5)
    before = {tag: {k: v.copy() for k, v in a.params.items()} for tag, a in ensemble.agents.items()}
    ensemble, history = smart_finetune(ensemble, mixed_dataset, tokens_by_chunk, perf)
    assert all(r.skipped for r in history)
    for tag, agent in ensemble.agents.items():
        assert all(np.array_equal(agent.params[k], before[tag][k]) for k in agent.params)


def test_save_load_ensemble(tmp_path, mixed_space, mixed_dataset, dictionary, tiny_config, tokens_by_chunk):
    ensemble = _ensemble(mixed_space, dictionary, tiny_config, lam=0.25)
    ensemble.baseline = 1.5
    save_ensemble(ensemble, tmp_path / "ens")
    loaded = load_ensemble(tmp_path / "ens")
    assert loaded.lam == 0.25 and loaded.baseline == 1.5
    assert loaded.space == mixed_space
    assert sorted(loaded.agents) == sorted(ensemble.agents)
    assert ensemble_rank_mse(loaded, mixed_dataset, tokens_by_chunk) == pytest.approx(
        ensemble_rank_mse(ensemble, mixed_dataset, tokens_by_chunk))
    with pytest.raises(ModelError):
        load_ensemble(tmp_path / "missing")


def test_untrained_ensemble_error_is_mean_square_rank(mixed_space, mixed_dataset, dictionary, tiny_config,
                                                      tokens_by_chunk):
    ensemble = _ensemble(mixed_space, dictionary, tiny_config)
    scaled = [np.array(r.ranks) / (np.array(mixed_space.cardinalities) - 1) for r in mixed_dataset.rows]
    expected = float(np.mean(np.square(scaled)))
    assert ensemble_rank_mse(ensemble, mixed_dataset, tokens_by_chunk) == pytest.approx(expected)
