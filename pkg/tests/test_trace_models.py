"""Tests for the trace-aware predictors (mode P and mode M)."""

import numpy as np
import pytest

from cpudse.errors import ModelError
from cpudse.modules.datagen import split
from cpudse.modules.design_space import normalize
from cpudse.modules.trace import build_dictionary
from cpudse.modules.trace_models import (
    MODE_M,
    MODE_P,
    aggregate_workload,
    batch_plan,
    batched_inference,
    evaluate_mse,
    examples_mse,
    forward_m,
    forward_p,
    init_model,
    load_model,
    make_examples,
    rank_mse,
    round_ranks,
    save_model,
    train,
)
from cpudse.schemas import TrainSpec


@pytest.fixture
def p_model(toy_space, dictionary, tiny_config):
    return init_model(MODE_P, toy_space, dictionary, tiny_config, seed=1)


@pytest.fixture
def m_model(toy_space, dictionary, tiny_config):
    return init_model(MODE_M, toy_space, dictionary, tiny_config, seed=1)


def test_init_rejects_bad_arguments(toy_space, dictionary, tiny_config):
    with pytest.raises(ModelError):
        init_model("Q", toy_space, dictionary, tiny_config)
    other = build_dictionary([], reserve_unknown=True)
    with pytest.raises(ModelError):
        init_model(MODE_P, toy_space, other, tiny_config)


def test_untrained_output_is_zero(p_model, m_model, tokens_by_chunk, toy_configs, toy_space):
    tokens = tokens_by_chunk[0]
    assert forward_p(p_model, tokens, normalize(toy_configs[0], toy_space)) == 0.0
    assert np.all(forward_m(m_model, tokens, 1.0) == 0.0)


def test_mode_and_shape_checks(p_model, m_model, tokens_by_chunk, toy_space):
    with pytest.raises(ModelError):
        forward_m(p_model, tokens_by_chunk[0], 1.0)
    with pytest.raises(ModelError):
        forward_p(p_model, tokens_by_chunk[0][:-1], np.zeros(len(toy_space)))
    with pytest.raises(ModelError):
        forward_p(p_model, tokens_by_chunk[0], np.zeros(len(toy_space) + 1))


def test_round_ranks_clamps_and_rounds(toy_space):
    assert round_ranks([-0.7, 2.5, 9.0], toy_space).ranks == (0, 3, 3)
    assert round_ranks([float("nan"), 1.49, 0.5], toy_space).ranks == (0, 1, 1)
    with pytest.raises(ModelError):
        round_ranks([0.0, 1.0], toy_space)


def test_batched_inference_matches_single_calls(p_model, m_model, tokens_by_chunk, toy_configs, toy_space):
    rng = np.random.default_rng(0)
    for model in (p_model, m_model):
        for name, value in model.params.items():
            if name.startswith("head"):
                model.params[name] = rng.normal(scale=0.2, size=value.shape)
    tokens = [tokens_by_chunk[i] for i in sorted(tokens_by_chunk)]
    x = normalize(toy_configs[1], toy_space)
    batched = batched_inference(p_model, tokens, x)
    single = [forward_p(p_model, t, x) for t in tokens]
    assert np.allclose(batched, single)
    raw = batched_inference(m_model, tokens, 0.3)
    assert raw.shape == (len(tokens), len(toy_space))
    assert np.allclose(raw[2], forward_m(m_model, tokens[2], 0.3))


def test_aggregate_workload():
    assert aggregate_workload([1.0, 3.0], [10, 30]) == pytest.approx(2.5)
    with pytest.raises(ModelError):
        aggregate_workload([1.0], [1, 2])
    with pytest.raises(ModelError):
        aggregate_workload([1.0], [0])


def test_batch_plan_covers_rows_once(p_model, toy_dataset):
    examples = make_examples(p_model, toy_dataset.rows, toy_dataset.header.param_names)
    plan = batch_plan(examples, 5, np.random.default_rng(3))
    flat = np.concatenate(plan)
    assert sorted(flat.tolist()) == list(range(len(examples)))
    assert all(len(b) <= 5 for b in plan)
    ids = examples.chunk_ids[flat]
    changes = int(np.sum(ids[1:] != ids[:-1]))
    assert changes == len(set(ids.tolist())) - 1


def test_training_keeps_best_validation_epoch(p_model, toy_dataset, tokens_by_chunk):
    spec = TrainSpec(epochs=4, batch_size=4, learning_rate=0.01, seed=2)
    seen = []
    model, history = train(p_model, toy_dataset, tokens_by_chunk, spec, on_epoch=seen.append)
    assert [r.epoch for r in history] == [1, 2, 3, 4]
    assert seen == history
    assert all(np.isfinite(r.train_loss) for r in history)

    _, valid = split(toy_dataset, 1.0 - spec.validation_fraction, spec.seed)
    valid_ex = make_examples(model, valid.rows, toy_dataset.header.param_names)
    best = min(r.validation_loss for r in history)
    assert examples_mse(model, valid_ex, tokens_by_chunk) == pytest.approx(best)
    assert evaluate_mse(model, toy_dataset, tokens_by_chunk) >= 0.0


def test_mode_m_training_and_rank_mse(m_model, toy_dataset, tokens_by_chunk):
    model, history = train(m_model, toy_dataset, tokens_by_chunk, TrainSpec(epochs=2, batch_size=8))
    assert len(history) == 2
    error = rank_mse(model, toy_dataset, tokens_by_chunk)
    assert 0.0 <= error
    assert evaluate_mse(model, toy_dataset, tokens_by_chunk) == pytest.approx(error)


def test_parameters_only_baseline_ignores_trace(toy_space, dictionary, tiny_config, tokens_by_chunk, toy_configs):
    model = init_model(MODE_P, toy_space, dictionary, tiny_config, trace_aware=False, seed=4)
    assert "embed" not in model.params
    model.params["head2.w"] = np.ones_like(model.params["head2.w"])
    x = normalize(toy_configs[0], toy_space)
    assert forward_p(model, tokens_by_chunk[0], x) == forward_p(model, tokens_by_chunk[3], x)


def test_save_load_preserves_predictions(tmp_path, p_model, tokens_by_chunk, toy_configs, toy_space):
    p_model.params["head2.w"] = np.full_like(p_model.params["head2.w"], 0.1)
    p_model.offset, p_model.scale = 0.4, 2.0
    path = tmp_path / "p.ckpt"
    save_model(p_model, path)
    loaded = load_model(path)
    x = normalize(toy_configs[2], toy_space)
    assert loaded.space == toy_space
    assert loaded.dictionary.mnemonics == p_model.dictionary.mnemonics
    assert forward_p(loaded, tokens_by_chunk[1], x) == forward_p(p_model, tokens_by_chunk[1], x)
