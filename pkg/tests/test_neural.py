"""Tests for the tensor autodiff, attention blocks, optimiser and checkpoints."""

import numpy as np
import pytest

from cpudse.errors import ModelError
from cpudse.modules.neural import (
    AdamState,
    Tensor,
    adam_step,
    concat,
    einsum,
    embed,
    encoder_layer,
    full_attention,
    gather_rows,
    layer_norm,
    load_checkpoint,
    masked_softmax,
    mean_pool,
    mlp_head,
    mse_loss,
    no_grad,
    numerical_gradient,
    pad_rows,
    parameter,
    positional_encoding,
    relative_error,
    save_checkpoint,
    windowed_attention,
)
from cpudse.schemas import ModelConfig


def _check(loss_fn, arrays, tol=1e-5):
    """Compare the autodiff gradient of loss_fn with central differences."""
    tensors = [parameter(a) for a in arrays]
    loss_fn(*tensors).backward()
    for t in tensors:
        numeric = numerical_gradient(lambda: loss_fn(*[Tensor(x.data) for x in tensors]).item(), t.data)
        assert relative_error(t.grad, numeric) < tol


def _layer_params(rng, d, ff):
    params = {}
    for name in ("wq", "wk", "wv", "wo"):
        params[f"l.attn.{name}"] = rng.normal(scale=0.3, size=(d, d))
        params[f"l.attn.b{name[1]}"] = rng.normal(scale=0.1, size=d)
    for ln in ("ln1", "ln2"):
        params[f"l.{ln}.g"] = 1.0 + rng.normal(scale=0.1, size=d)
        params[f"l.{ln}.b"] = rng.normal(scale=0.1, size=d)
    params["l.ff1.w"] = rng.normal(scale=0.3, size=(d, ff))
    params["l.ff1.b"] = rng.normal(scale=0.1, size=ff)
    params["l.ff2.w"] = rng.normal(scale=0.3, size=(ff, d))
    params["l.ff2.b"] = rng.normal(scale=0.1, size=d)
    return params


def _dims(rng, low, high, n):
    return [int(v) for v in rng.integers(low, high, size=n)]


def _valid(rng, s):
    valid = rng.random(s) < 0.75
    valid[0] = True
    return valid


# Each case draws a small random shape and returns (op over tensors, input arrays).

def _arith_case(rng):
    n, m = _dims(rng, 1, 5, 2)
    x = rng.normal(size=(n, m))
    x += np.where(x >= 0, 0.2, -0.2)  # relu kink stays out of reach
    c = rng.uniform(0.5, 2.0)
    return (lambda a, b: a.relu() * b + (a * b - b) / c - (2.0 - a) + (-a)), [x, rng.normal(size=m)]


def _matmul_case(rng):
    n, k, m = _dims(rng, 1, 5, 3)
    left = rng.normal(size=(k,) if rng.random() < 0.3 else (n, k))
    return (lambda a, b: a @ b), [left, rng.normal(size=(k, m))]


def _shape_case(rng):
    shape = tuple(_dims(rng, 1, 4, 3))
    axis = int(rng.integers(0, 3))

    def op(a):
        return (a.sum(axis=axis, keepdims=True) * a.T.T
                + a.reshape(-1).reshape(shape)[::-1] * a.mean()
                + a.transpose(1, 0, 2).transpose(1, 0, 2).sum(axis=axis, keepdims=True))
    return op, [rng.normal(size=shape)]


def _concat_case(rng):
    axis = int(rng.integers(0, 2))
    n = int(rng.integers(1, 4))
    arrays = [rng.normal(size=(w, n) if axis == 0 else (n, w)) for w in _dims(rng, 1, 4, 3)]
    return (lambda *ts: concat(ts, axis=axis)), arrays


def _gather_case(rng):
    rows, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    index = rng.integers(0, rows, size=tuple(_dims(rng, 1, 4, 2)))
    return (lambda t: gather_rows(t, index)), [rng.normal(size=(rows, d))]


def _pad_case(rng):
    before, after = _dims(rng, 0, 3, 2)
    return (lambda t: pad_rows(t, before, after)), [rng.normal(size=tuple(_dims(rng, 1, 4, 2)))]


def _einsum_case(rng):
    s, w, d = _dims(rng, 1, 4, 3)
    return (lambda a, b: einsum("sd,swd->sw", a, b)), [rng.normal(size=(s, d)), rng.normal(size=(s, w, d))]


def _softmax_case(rng):
    n, m = _dims(rng, 1, 5, 2)
    mask = rng.random((n, m)) < 0.7
    mask[:, 0] = True
    if n > 1 and rng.random() < 0.3:
        mask[-1] = False
    return (lambda t: masked_softmax(t, mask)), [rng.normal(size=(n, m))]


def _layer_norm_case(rng):
    n, d = int(rng.integers(1, 4)), int(rng.integers(3, 7))
    arrays = [rng.normal(size=(n, d)), 1.0 + rng.normal(scale=0.3, size=d), rng.normal(size=d)]
    return layer_norm, arrays


def _mse_case(rng):
    shape = tuple(_dims(rng, 1, 4, 2))
    target = rng.normal(size=shape)
    return (lambda p: mse_loss(p, target)), [rng.normal(size=shape)]


def _embed_case(rng):
    vocab, d, s = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 8))
    tokens = rng.integers(0, vocab, size=s)
    pad_id = int(rng.integers(0, vocab)) if rng.random() < 0.5 else None
    return (lambda table: embed(tokens, table, pad_id)), [rng.normal(size=(vocab, d))]


def _mean_pool_case(rng):
    s, d = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    valid = _valid(rng, s)
    return (lambda x: mean_pool(x, valid)), [rng.normal(size=(s, d))]


def _windowed_case(rng):
    s, dh = int(rng.integers(2, 7)), int(rng.integers(1, 5))
    w = int(rng.integers(0, s + 1))
    valid = _valid(rng, s)
    return (lambda q, k, v: windowed_attention(q, k, v, w, valid)), [rng.normal(size=(s, dh)) for _ in range(3)]


def _full_attention_case(rng):
    s, dh = int(rng.integers(2, 7)), int(rng.integers(1, 5))
    valid = _valid(rng, s)
    return (lambda q, k, v: full_attention(q, k, v, valid)), [rng.normal(size=(s, dh)) for _ in range(3)]


def _mlp_head_case(rng):
    pooled, extra = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    widths = [pooled + extra] + _dims(rng, 1, 5, int(rng.integers(1, 3))) + [int(rng.integers(1, 3))]
    inputs = rng.normal(size=extra)
    flat = []
    for a, b in zip(widths, widths[1:]):
        flat += [rng.normal(size=(a, b)), rng.normal(size=b)]

    def op(p, *weights):
        return mlp_head(p, inputs, list(zip(weights[0::2], weights[1::2])))
    return op, [rng.normal(size=pooled)] + flat


def _encoder_case(rng):
    d, s = 4, int(rng.integers(2, 6))
    heads, w, ff = int(rng.choice([1, 2])), int(rng.integers(0, s)), int(rng.integers(2, 7))
    params = _layer_params(rng, d, ff)
    names = sorted(params)
    valid = _valid(rng, s)

    def op(x, *values):
        return encoder_layer(x, dict(zip(names, values)), "l", heads, w, valid)
    return op, [rng.normal(size=(s, d))] + [params[n] for n in names]


GRADIENT_CASES = {
    "arith": _arith_case,
    "matmul": _matmul_case,
    "shape": _shape_case,
    "concat": _concat_case,
    "gather_rows": _gather_case,
    "pad_rows": _pad_case,
    "einsum": _einsum_case,
    "masked_softmax": _softmax_case,
    "layer_norm": _layer_norm_case,
    "mse_loss": _mse_case,
    "embed": _embed_case,
    "mean_pool": _mean_pool_case,
    "windowed_attention": _windowed_case,
    "full_attention": _full_attention_case,
    "mlp_head": _mlp_head_case,
    "encoder_layer": _encoder_case,
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op_name", sorted(GRADIENT_CASES))
def test_gradient_matches_central_differences(op_name, seed):
    rng = np.random.default_rng(1000 + seed)
    op, arrays = GRADIENT_CASES[op_name](rng)
    # random projection of the output to a scalar
    weights = rng.normal(size=op(*[Tensor(a) for a in arrays]).shape)
    _check(lambda *ts: (op(*ts) * weights).sum(), arrays, tol=1e-4)


def test_elementwise_and_matmul_gradients():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    _check(lambda x, y: ((x @ y).relu() * 2.0 - 1.0).mean(), [a + 0.05, b])
    _check(lambda x, y: (x[:, :2] / 3.0 + y.T[:, :3].T.sum()).sum(), [a, b])


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    _check(lambda x, g, b: (layer_norm(x, g, b) * layer_norm(x, g, b)[::-1]).sum(),
           [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)])


def test_softmax_rows_sum_to_one_and_mask():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]))
    mask = np.array([[True, True, False], [False, False, False]])
    y = masked_softmax(x, mask).data
    assert y[0].sum() == pytest.approx(1.0)
    assert y[0, 2] == 0.0
    assert np.all(y[1] == 0.0)


def test_window_covering_sequence_equals_full_attention():
    rng = np.random.default_rng(2)
    s, dh = 6, 4
    q, k, v = (Tensor(rng.normal(size=(s, dh))) for _ in range(3))
    valid = np.array([True] * 5 + [False])
    dense = full_attention(q, k, v, valid).data
    for w in (s - 1, s + 3):
        assert np.allclose(windowed_attention(q, k, v, w, valid).data, dense)


def test_window_limits_receptive_field():
    rng = np.random.default_rng(3)
    s, dh = 8, 2
    q, k = Tensor(rng.normal(size=(s, dh))), Tensor(rng.normal(size=(s, dh)))
    v = rng.normal(size=(s, dh))
    base = windowed_attention(q, k, Tensor(v), 1).data
    changed = v.copy()
    changed[7] += 10.0
    after = windowed_attention(q, k, Tensor(changed), 1).data
    assert np.allclose(base[:6], after[:6])
    assert not np.allclose(base[6:], after[6:])


def test_windowed_attention_gradient():
    rng = np.random.default_rng(4)
    arrays = [rng.normal(size=(5, 3)) for _ in range(3)]
    _check(lambda q, k, v: (windowed_attention(q, k, v, 1) * windowed_attention(q, k, v, 1)).sum(), arrays)


def test_encoder_layer_gradient():
    rng = np.random.default_rng(5)
    d, s = 4, 5
    params = _layer_params(rng, d, 8)
    names = sorted(params)
    valid = np.array([True, True, True, True, False])
    x0 = rng.normal(size=(s, d))

    def loss(x, *values):
        out = encoder_layer(x, dict(zip(names, values)), "l", 2, 1, valid)
        return mean_pool(out, valid).sum()

    _check(loss, [x0] + [params[n] for n in names], tol=1e-4)


def test_embedding_zeroes_pad_rows():
    table = Tensor(np.arange(12, dtype=float).reshape(4, 3))
    out = embed(np.array([1, 3, 3]), table, pad_id=3).data
    assert np.allclose(out[0], [3.0, 4.0, 5.0])
    assert np.all(out[1:] == 0.0)
    with pytest.raises(ModelError):
        embed(np.array([4]), table)


def test_positional_encoding_values():
    pe = positional_encoding(4, 6)
    assert pe.shape == (4, 6)
    assert np.allclose(pe[0, 0::2], 0.0) and np.allclose(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(np.sin(1.0))
    with pytest.raises(ModelError):
        positional_encoding(4, 5)


def test_mean_pool_ignores_padding():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]))
    assert np.allclose(mean_pool(x, np.array([True, True, False])).data, [2.0, 3.0])
    with pytest.raises(ModelError):
        mean_pool(x, np.zeros(3, dtype=bool))


def test_mlp_head_width_check():
    rng = np.random.default_rng(6)
    layers = [(parameter(rng.normal(size=(5, 4))), parameter(np.zeros(4))),
              (parameter(rng.normal(size=(4, 1))), parameter(np.zeros(1)))]
    assert mlp_head(Tensor(np.ones(3)), np.ones(2), layers).shape == (1,)
    assert mlp_head(None, np.ones(5), layers).shape == (1,)
    with pytest.raises(ModelError):
        mlp_head(Tensor(np.ones(3)), np.ones(3), layers)


def test_no_grad_builds_no_graph():
    p = parameter(np.ones(3))
    with no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad


def test_adam_reduces_quadratic_loss():
    target = np.array([1.0, -2.0, 0.5])
    params = {"w": np.zeros(3)}
    state = AdamState(lr=0.1)
    start = float(((params["w"] - target) ** 2).sum())
    for _ in range(200):
        w = parameter(params["w"])
        loss = mse_loss(w, target)
        loss.backward()
        adam_step(params, {"w": w.grad}, state)
    assert float(((params["w"] - target) ** 2).sum()) < 0.05 * start
    assert state.step == 200


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(ModelError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_checkpoint_roundtrip(tmp_path):
    config = ModelConfig(s=16, d=8, heads=2, encoder_layers=1, head_layers=2, window=4, vocab=20)
    tensors = {"b": np.arange(3.0), "a": np.random.default_rng(7).normal(size=(2, 4))}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, tensors, {"mode": "P"})
    loaded_config, loaded, meta = load_checkpoint(path)
    assert loaded_config == config
    assert meta == {"mode": "P"}
    assert set(loaded) == {"a", "b"}
    assert all(np.array_equal(loaded[k], tensors[k]) for k in tensors)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(ModelError):
        load_checkpoint(bogus)
