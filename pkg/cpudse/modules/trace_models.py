"""
Trace-aware predictors built on the neural kernel.

Mode P maps (trace chunk, normalised parameters) to one metric. Mode M maps
(trace chunk, metric) to raw parameter ranks over a subset of the design
space. Both share the same trunk: token embedding plus positional encoding,
windowed-attention encoder layers and mean pooling. A parameters-only
baseline (trace_aware=False) skips the trunk and keeps the same head.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from cpudse import config
from cpudse.errors import ModelError
from cpudse.modules.datagen import split
from cpudse.modules.design_space import dump_design_space, parse_design_space
from cpudse.modules.metrics import metric_value
from cpudse.modules.neural import (
    AdamState,
    Tensor,
    adam_step,
    broadcast_rows,
    concat,
    embed,
    encoder_layer,
    load_checkpoint,
    mean_pool,
    mlp_head,
    mse_loss,
    no_grad,
    parameter,
    positional_encoding,
    save_checkpoint,
)
from cpudse.modules.trace import TokenDict
from cpudse.schemas import (
    Configuration,
    Dataset,
    DatasetRow,
    DesignSpace,
    EpochRecord,
    ModelConfig,
    TrainSpec,
)

MODE_P = "P"
MODE_M = "M"
MODES = (MODE_P, MODE_M)


@dataclass
class PredictorModel:
    """
    One predictor. `space` is the parameter input space in mode P and the
    predicted subset in mode M.

    `offset`/`scale` normalise the metric: the regression target in mode P,
    the constraint input in mode M.
    """
    mode: str
    config: ModelConfig
    space: DesignSpace
    dictionary: TokenDict
    params: dict[str, np.ndarray]
    metric: str = "objective"
    trace_aware: bool = True
    offset: float = 0.0
    scale: float = 1.0

    @property
    def extra_dim(self) -> int:
        return len(self.space) if self.mode == MODE_P else 1

    @property
    def out_dim(self) -> int:
        return 1 if self.mode == MODE_P else len(self.space)

    @property
    def rank_scale(self) -> np.ndarray:
        """count - 1 per parameter (1 for single-valued parameters)."""
        return np.array([max(c - 1, 1) for c in self.space.cardinalities], dtype=np.float64)

    def copy(self) -> "PredictorModel":
        return PredictorModel(
            mode=self.mode, config=self.config, space=self.space, dictionary=self.dictionary,
            params={k: v.copy() for k, v in self.params.items()}, metric=self.metric,
            trace_aware=self.trace_aware, offset=self.offset, scale=self.scale,
        )


def default_model_config(vocab: int, s: int = config.CHUNK_LEN) -> ModelConfig:
    return ModelConfig(s=s, d=config.D_MODEL, heads=config.HEADS,
                       encoder_layers=config.ENCODER_LAYERS, head_layers=config.HEAD_LAYERS,
                       window=min(config.WINDOW, s), vocab=vocab)


def init_model(mode: str, space: DesignSpace, dictionary: TokenDict,
               model_config: Optional[ModelConfig] = None, metric: str = "objective",
               trace_aware: bool = True, seed: int = 0) -> PredictorModel:
    """Fresh model; the output layer starts at zero so untrained predictions are 0."""
    if mode not in MODES:
        raise ModelError(f"Unknown model mode '{mode}' (expected P or M)")
    if not len(space):
        raise ModelError("Model needs at least one parameter")
    cfg = model_config or default_model_config(dictionary.vocab)
    if cfg.vocab != dictionary.vocab:
        raise ModelError(f"ModelConfig vocab {cfg.vocab} does not match dictionary vocab {dictionary.vocab}")

    rng = np.random.default_rng(seed)
    d, ff = cfg.d, cfg.ff_dim
    params: dict[str, np.ndarray] = {}

    if trace_aware:
        params["embed"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.vocab, d))
        for layer in range(cfg.encoder_layers):
            p = f"enc{layer}"
            for ln in ("ln1", "ln2"):
                params[f"{p}.{ln}.g"] = np.ones(d)
                params[f"{p}.{ln}.b"] = np.zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                params[f"{p}.attn.{w}"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
                params[f"{p}.attn.b{w[1]}"] = np.zeros(d)
            params[f"{p}.ff1.w"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, ff))
            params[f"{p}.ff1.b"] = np.zeros(ff)
            params[f"{p}.ff2.w"] = rng.normal(0.0, np.sqrt(1.0 / ff), size=(ff, d))
            params[f"{p}.ff2.b"] = np.zeros(d)

    extra = len(space) if mode == MODE_P else 1
    out = 1 if mode == MODE_P else len(space)
    width = (d if trace_aware else 0) + extra
    for i in range(cfg.head_layers):
        params[f"head{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / width), size=(width, d))
        params[f"head{i}.b"] = np.zeros(d)
        width = d
    last = cfg.head_layers
    params[f"head{last}.w"] = np.zeros((width, out))
    params[f"head{last}.b"] = np.zeros(out)

    return PredictorModel(mode=mode, config=cfg, space=space, dictionary=dictionary,
                          params=params, metric=metric, trace_aware=trace_aware)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def param_tensors(model: PredictorModel, trainable: bool) -> dict[str, Tensor]:
    wrap = parameter if trainable else Tensor
    return {name: wrap(value) for name, value in model.params.items()}


def _check_tokens(model: PredictorModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (model.config.s,):
        raise ModelError(f"expected {model.config.s} tokens, got shape {tokens.shape}")
    return tokens


def _encode(model: PredictorModel, t: dict[str, Tensor], tokens: np.ndarray) -> Tensor:
    cfg = model.config
    pad = model.dictionary.pad
    valid = tokens != pad
    x = embed(tokens, t["embed"], pad_id=pad)
    x = x + positional_encoding(cfg.s, cfg.d) * valid[:, None]
    for layer in range(cfg.encoder_layers):
        x = encoder_layer(x, t, f"enc{layer}", cfg.heads, cfg.window, valid)
    return mean_pool(x, valid)


def _head(model: PredictorModel, t: dict[str, Tensor], pooled: Optional[Tensor], extra: np.ndarray) -> Tensor:
    layers = [(t[f"head{i}.w"], t[f"head{i}.b"]) for i in range(model.config.head_layers + 1)]
    if pooled is not None:
        pooled = broadcast_rows(pooled, extra.shape[0])
    return mlp_head(pooled, extra, layers)


def _rows(model: PredictorModel, t: dict[str, Tensor], tokens: np.ndarray, extra: np.ndarray) -> Tensor:
    """Head outputs (n, out) for n constraint rows sharing one chunk."""
    pooled = _encode(model, t, tokens) if model.trace_aware else None
    return _head(model, t, pooled, extra)


def _require_mode(model: PredictorModel, mode: str) -> None:
    if model.mode != mode:
        raise ModelError(f"model is in mode {model.mode}, operation needs mode {mode}")


def _p_extra(model: PredictorModel, norm_params: np.ndarray) -> np.ndarray:
    norm_params = np.asarray(norm_params, dtype=np.float64).reshape(-1)
    if norm_params.shape[0] != model.extra_dim:
        raise ModelError(f"expected {model.extra_dim} normalised parameters, got {norm_params.shape[0]}")
    return norm_params[None, :]


def _m_extra(model: PredictorModel, metric: float) -> np.ndarray:
    return np.array([[(float(metric) - model.offset) / model.scale]])


def forward_p(model: PredictorModel, tokens: np.ndarray, norm_params: np.ndarray) -> float:
    """Predicted metric for one chunk under one configuration."""
    _require_mode(model, MODE_P)
    extra = _p_extra(model, norm_params)
    with no_grad():
        out = _rows(model, param_tensors(model, False), _check_tokens(model, tokens), extra)
    return float(model.offset + model.scale * out.data[0, 0])


def forward_m(model: PredictorModel, tokens: np.ndarray, metric: float) -> np.ndarray:
    """Raw (unrounded, unbounded) ranks for the model's parameter subset."""
    _require_mode(model, MODE_M)
    with no_grad():
        out = _rows(model, param_tensors(model, False), _check_tokens(model, tokens), _m_extra(model, metric))
    return out.data[0] * model.rank_scale


def round_ranks(raw: Sequence[float], subset: DesignSpace) -> Configuration:
    """Clamp to [0, count-1], then round half away from zero."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (len(subset),):
        raise ModelError(f"{raw.shape[0] if raw.ndim else 1} raw ranks for {len(subset)} parameters")
    top = np.array(subset.cardinalities, dtype=np.float64) - 1
    clamped = np.clip(np.nan_to_num(raw, nan=0.0), 0.0, top)
    return Configuration(ranks=tuple(int(r) for r in np.floor(clamped + 0.5)))


# ---------------------------------------------------------------------------
# Batched inference
# ---------------------------------------------------------------------------

def encode_chunks(model: PredictorModel, tokens_list: Sequence[np.ndarray]) -> list[Optional[np.ndarray]]:
    """Pooled trunk outputs per chunk (None for the parameters-only baseline)."""
    if not model.trace_aware:
        return [None] * len(tokens_list)
    t = param_tensors(model, False)

    def one(tokens):
        with no_grad():
            return _encode(model, t, _check_tokens(model, tokens)).data

    return _parallel_map(one, tokens_list)


def predict_pooled(model: PredictorModel, pooled: Sequence[Optional[np.ndarray]], constraint) -> np.ndarray:
    """Head outputs for pre-encoded chunks: (n,) metrics in mode P, (n, k) raw ranks in mode M."""
    extra = _p_extra(model, constraint) if model.mode == MODE_P else _m_extra(model, constraint)
    t = param_tensors(model, False)
    with no_grad():
        if model.trace_aware:
            stacked = Tensor(np.stack(pooled)) if len(pooled) else Tensor(np.zeros((0, model.config.d)))
            out = mlp_head(stacked, np.repeat(extra, len(pooled), axis=0),
                           [(t[f"head{i}.w"], t[f"head{i}.b"]) for i in range(model.config.head_layers + 1)])
        else:
            out = _head(model, t, None, np.repeat(extra, len(pooled), axis=0))
    if model.mode == MODE_P:
        return model.offset + model.scale * out.data[:, 0]
    return out.data * model.rank_scale


def batched_inference(model: PredictorModel, tokens_list: Sequence[np.ndarray], constraint) -> np.ndarray:
    """
    Predictions for every chunk under one constraint, in input order.

    Args:
        constraint: normalised parameter vector (mode P) or metric value (mode M)

    Returns:
        (n,) metrics in mode P, (n, k) raw ranks in mode M
    """
    return predict_pooled(model, encode_chunks(model, tokens_list), constraint)


def _parallel_map(fn: Callable, items: Sequence) -> list:
    if config.THREADS > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def aggregate_workload(predictions: Sequence[float], instructions: Sequence[int]) -> float:
    """Instruction-weighted mean of chunk-level predictions."""
    predictions = np.asarray(predictions, dtype=np.float64)
    weights = np.asarray(instructions, dtype=np.float64)
    if predictions.shape != weights.shape or not len(weights):
        raise ModelError("need one instruction count per prediction")
    if weights.sum() <= 0:
        raise ModelError("instruction counts sum to zero")
    return float(np.dot(predictions, weights) / weights.sum())


# ---------------------------------------------------------------------------
# Training examples
# ---------------------------------------------------------------------------

@dataclass
class Examples:
    """Dataset rows as model inputs/targets in normalised units."""
    chunk_ids: np.ndarray
    extra: np.ndarray
    targets: np.ndarray
    metrics: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def take(self, index: np.ndarray) -> "Examples":
        return Examples(self.chunk_ids[index], self.extra[index], self.targets[index], self.metrics[index])


def _columns(model: PredictorModel, param_names: Sequence[str]) -> list[int]:
    position = {name: i for i, name in enumerate(param_names)}
    missing = [n for n in model.space.names if n not in position]
    if missing:
        raise ModelError(f"dataset has no column for parameter '{missing[0]}'")
    return [position[n] for n in model.space.names]


def fit_normalization(model: PredictorModel, rows: Sequence[DatasetRow]) -> None:
    """Set the metric offset/scale from rows (mean and standard deviation)."""
    values = np.array([metric_value(r.metrics, model.metric) for r in rows], dtype=np.float64)
    if not len(values):
        raise ModelError("cannot fit normalisation on an empty dataset")
    model.offset = float(values.mean())
    std = float(values.std())
    model.scale = std if std > 1e-12 else 1.0


def make_examples(model: PredictorModel, rows: Sequence[DatasetRow], param_names: Sequence[str]) -> Examples:
    cols = _columns(model, param_names)
    cards = np.array(model.space.cardinalities, dtype=np.float64)
    spread = np.maximum(cards - 1, 1)
    ranks = np.array([[r.ranks[c] for c in cols] for r in rows], dtype=np.float64).reshape(len(rows), len(cols))
    metric = np.array([metric_value(r.metrics, model.metric) for r in rows], dtype=np.float64)
    scaled_ranks = np.where(cards > 1, ranks / spread, 0.0)
    scaled_metric = ((metric - model.offset) / model.scale)[:, None]
    chunk_ids = np.array([r.chunk_id for r in rows], dtype=np.int64)
    if model.mode == MODE_P:
        return Examples(chunk_ids, scaled_ranks, scaled_metric, metric)
    return Examples(chunk_ids, scaled_metric, scaled_ranks, metric)


def batch_plan(examples: Examples, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; rows of one chunk stay adjacent so each batch encodes few chunks."""
    chunks = np.unique(examples.chunk_ids)
    rng.shuffle(chunks)
    order = []
    for chunk_id in chunks:
        rows = np.flatnonzero(examples.chunk_ids == chunk_id)
        rng.shuffle(rows)
        order.append(rows)
    order = np.concatenate(order) if order else np.zeros(0, dtype=np.int64)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def batch_forward(model: PredictorModel, t: dict[str, Tensor], batch: Examples,
                  tokens_by_chunk: Mapping[int, np.ndarray]) -> tuple[Tensor, np.ndarray]:
    """
    Forward one batch, encoding each distinct chunk once.

    Returns the stacked outputs and the row permutation they follow.
    """
    outputs, order = [], []
    for chunk_id in dict.fromkeys(batch.chunk_ids.tolist()):
        rows = np.flatnonzero(batch.chunk_ids == chunk_id)
        tokens = tokens_by_chunk.get(chunk_id)
        if tokens is None:
            raise ModelError(f"no tokens for chunk {chunk_id}")
        outputs.append(_rows(model, t, _check_tokens(model, tokens), batch.extra[rows]))
        order.append(rows)
    return concat(outputs, axis=0), np.concatenate(order)


def supervised_loss(model: PredictorModel, t: dict[str, Tensor], batch: Examples,
                    tokens_by_chunk: Mapping[int, np.ndarray]) -> tuple[Tensor, Tensor, np.ndarray]:
    pred, order = batch_forward(model, t, batch, tokens_by_chunk)
    return mse_loss(pred, batch.targets[order]), pred, order


def gradients(t: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in t.items()}


def examples_mse(model: PredictorModel, examples: Examples, tokens_by_chunk: Mapping[int, np.ndarray]) -> float:
    """Loss in training units (normalised targets)."""
    if not len(examples):
        raise ModelError("cannot evaluate on an empty dataset")
    t = param_tensors(model, False)
    with no_grad():
        loss, _, _ = supervised_loss(model, t, examples, tokens_by_chunk)
    return loss.item()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(model: PredictorModel, dataset: Dataset, tokens_by_chunk: Mapping[int, np.ndarray],
          spec: TrainSpec = TrainSpec(),
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> tuple[PredictorModel, list[EpochRecord]]:
    """
    Fit the model with MSE + Adam on a chunk-stratified train/validation split.

    The parameters of the epoch with the lowest validation loss (training
    loss when the dataset has a single chunk) are kept.
    """
    if not dataset.rows:
        raise ModelError("cannot train on an empty dataset")
    train_set, valid_set = split(dataset, 1.0 - spec.validation_fraction, spec.seed)
    fit_normalization(model, train_set.rows)

    names = dataset.header.param_names
    train_ex = make_examples(model, train_set.rows, names)
    valid_ex = make_examples(model, valid_set.rows, names) if valid_set.rows else None

    rng = np.random.default_rng(spec.seed)
    state = AdamState(lr=spec.learning_rate)
    history: list[EpochRecord] = []
    best_loss, best_params = np.inf, None

    for epoch in range(1, spec.epochs + 1):
        total, seen = 0.0, 0
        for index in batch_plan(train_ex, spec.batch_size, rng):
            batch = train_ex.take(index)
            t = param_tensors(model, True)
            loss, _, _ = supervised_loss(model, t, batch, tokens_by_chunk)
            loss.backward()
            adam_step(model.params, gradients(t), state)
            total += loss.item() * len(batch)
            seen += len(batch)

        train_loss = total / seen
        valid_loss = examples_mse(model, valid_ex, tokens_by_chunk) if valid_ex is not None else None
        record = EpochRecord(epoch=epoch, train_loss=train_loss, validation_loss=valid_loss)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)

        score = valid_loss if valid_loss is not None else train_loss
        if score < best_loss:
            best_loss = score
            best_params = {k: v.copy() for k, v in model.params.items()}

    if best_params is not None:
        model.params = best_params
    return model, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _predictions(model: PredictorModel, rows: Sequence[DatasetRow], param_names: Sequence[str],
                 tokens_by_chunk: Mapping[int, np.ndarray]) -> tuple[np.ndarray, Examples]:
    examples = make_examples(model, rows, param_names)
    t = param_tensors(model, False)
    out = np.zeros_like(examples.targets)
    with no_grad():
        pred, order = batch_forward(model, t, examples, tokens_by_chunk)
    out[order] = pred.data
    return out, examples


def evaluate_mse(model: PredictorModel, dataset: Dataset, tokens_by_chunk: Mapping[int, np.ndarray]) -> float:
    """MSE in metric units (mode P) or in scaled rank units (mode M)."""
    if model.mode == MODE_M:
        return rank_mse(model, dataset, tokens_by_chunk)
    if not dataset.rows:
        raise ModelError("cannot evaluate on an empty dataset")
    out, examples = _predictions(model, dataset.rows, dataset.header.param_names, tokens_by_chunk)
    predicted = model.offset + model.scale * out[:, 0]
    return float(np.mean((predicted - examples.metrics) ** 2))


def rank_mse(model: PredictorModel, dataset: Dataset, tokens_by_chunk: Mapping[int, np.ndarray]) -> float:
    """Mean squared error between predicted and true ranks, each scaled to [0, 1]."""
    _require_mode(model, MODE_M)
    if not dataset.rows:
        raise ModelError("cannot evaluate on an empty dataset")
    out, examples = _predictions(model, dataset.rows, dataset.header.param_names, tokens_by_chunk)
    return float(np.mean((out - examples.targets) ** 2))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(model: PredictorModel, path: Path) -> None:
    metadata = {
        "mode": model.mode,
        "metric": model.metric,
        "trace_aware": model.trace_aware,
        "offset": model.offset,
        "scale": model.scale,
        "dictionary": list(model.dictionary.mnemonics),
        "space": dump_design_space(model.space),
    }
    save_checkpoint(path, model.config, model.params, metadata)


def load_model(path: Path) -> PredictorModel:
    cfg, tensors, meta = load_checkpoint(path)
    try:
        return PredictorModel(
            mode=meta["mode"], config=cfg, space=parse_design_space(meta["space"]),
            dictionary=TokenDict(tuple(meta["dictionary"])), params=tensors,
            metric=meta["metric"], trace_aware=meta["trace_aware"],
            offset=meta["offset"], scale=meta["scale"],
        )
    except KeyError as e:
        raise ModelError(f"Checkpoint {path} is missing metadata field {e}")
