"""Dense float64 tensors with reverse-mode differentiation and the encoder building blocks."""

import contextvars
import json
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from cpudse.errors import ModelError
from cpudse.schemas import ModelConfig

_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)

ArrayLike = Union["Tensor", np.ndarray, float, int]


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (inference)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the closure that pushes its gradient to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable[[np.ndarray], None]] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's .grad."""
        if grad is None:
            if self.data.size != 1:
                raise ModelError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        return _make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return _make(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        return _make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other: Union[float, int]) -> "Tensor":
        if isinstance(other, Tensor):
            raise ModelError("division is only defined by constants")
        return self * (1.0 / other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self, as_tensor(other)

        def backward(g):
            if a.requires_grad:
                if b.data.ndim == 1:
                    a._accumulate(np.multiply.outer(g, b.data))
                else:
                    a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                if a.data.ndim == 1:
                    b._accumulate(np.multiply.outer(a.data, g))
                else:
                    b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        return _make(a.data @ b.data, (a, b), backward)

    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)
        return _make(a.data[index], (a,), backward)

    # -- reductions and shape -----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))
        return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count

    def reshape(self, *shape) -> "Tensor":
        a = self
        return _make(a.data.reshape(*shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    def transpose(self, *axes) -> "Tensor":
        a = self
        axes = axes or tuple(reversed(range(a.data.ndim)))
        inverse = np.argsort(axes)
        return _make(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inverse)))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return _make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    needs = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return x.relu()


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            if part.requires_grad:
                part._accumulate(piece)
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """table[index] along the first axis; index may have any shape."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        table._accumulate(full)
    return _make(table.data[index], (table,), backward)


def pad_rows(x: Tensor, before: int, after: int) -> Tensor:
    """Zero rows added around the first axis."""
    widths = [(before, after)] + [(0, 0)] * (x.data.ndim - 1)
    n = x.shape[0]
    return _make(np.pad(x.data, widths), (x,), lambda g: x._accumulate(g[before:before + n]))


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated or operand-private summed indices."""
    inputs, out = spec.replace(" ", "").split("->")
    in_a, in_b = inputs.split(",")
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.einsum(f"{out},{in_b}->{in_a}", g, b.data))
        if b.requires_grad:
            b._accumulate(np.einsum(f"{out},{in_a}->{in_b}", g, a.data))
    return _make(np.einsum(spec, a.data, b.data), (a, b), backward)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over unmasked entries; fully masked rows give zeros."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    scores = np.where(mask, x.data, -np.inf)
    peak = np.max(scores, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(np.where(mask, x.data - peak, -np.inf))
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def mse_loss(pred: Tensor, target: ArrayLike) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ModelError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# Encoder building blocks
# ---------------------------------------------------------------------------

def embed(tokens: np.ndarray, table: Tensor, pad_id: Optional[int] = None) -> Tensor:
    """Row t = table[token_t]; pad rows (token == pad_id) are zero."""
    tokens = np.asarray(tokens, dtype=np.int64)
    vocab = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ModelError(f"token id out of range for vocabulary of {vocab}")
    rows = gather_rows(table, tokens)
    if pad_id is None:
        return rows
    return rows * (tokens != pad_id).astype(np.float64)[:, None]


def positional_encoding(s: int, d: int) -> np.ndarray:
    """Sinusoidal encodings: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(...)."""
    if d % 2:
        raise ModelError("positional encodings need an even width")
    positions = np.arange(s, dtype=np.float64)[:, None]
    rates = 1.0 / np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((s, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(positions * rates)
    pe[:, 1::2] = np.cos(positions * rates)
    return pe


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, w: int,
                       valid: Optional[np.ndarray] = None) -> Tensor:
    """
    Banded self-attention: row t attends to positions [t-w, t+w] inside the
    sequence, skipping invalid (pad) positions.

    Keys and values are zero-padded by w rows on both sides and gathered into
    (s, 2w+1, d_h) windows, so cost is linear in s.
    """
    s, dh = q.shape
    if valid is None:
        valid = np.ones(s, dtype=bool)
    offsets = np.arange(2 * w + 1)
    index = np.arange(s)[:, None] + offsets[None, :]
    positions = index - w
    in_range = (positions >= 0) & (positions < s)
    mask = in_range & valid[np.clip(positions, 0, s - 1)]

    k_win = gather_rows(pad_rows(k, w, w), index)
    v_win = gather_rows(pad_rows(v, w, w), index)
    scores = einsum("sd,swd->sw", q, k_win) * (1.0 / math.sqrt(dh))
    weights = masked_softmax(scores, mask, axis=-1)
    return einsum("sw,swd->sd", weights, v_win)


def full_attention(q: Tensor, k: Tensor, v: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
    """Reference dense attention over every valid key."""
    s, dh = q.shape
    if valid is None:
        valid = np.ones(s, dtype=bool)
    scores = (q @ k.T) * (1.0 / math.sqrt(dh))
    weights = masked_softmax(scores, np.broadcast_to(valid[None, :], (s, s)), axis=-1)
    return weights @ v


def multi_head_attention(x: Tensor, params: dict, prefix: str, heads: int, w: int,
                         valid: np.ndarray) -> Tensor:
    d = x.shape[-1]
    dh = d // heads
    q = x @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = x @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = x @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    outputs = [
        windowed_attention(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh],
                           v[:, h * dh:(h + 1) * dh], w, valid)
        for h in range(heads)
    ]
    return concat(outputs, axis=-1) @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def encoder_layer(x: Tensor, params: dict, prefix: str, heads: int, w: int,
                  valid: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm residual block: x + MHA(LN(x)), then + FF(LN(.))."""
    if valid is None:
        valid = np.ones(x.shape[0], dtype=bool)
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + multi_head_attention(h, params, f"{prefix}.attn", heads, w, valid)
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    ff = (h @ params[f"{prefix}.ff1.w"] + params[f"{prefix}.ff1.b"]).relu()
    return x + (ff @ params[f"{prefix}.ff2.w"] + params[f"{prefix}.ff2.b"])


def mean_pool(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over valid rows only."""
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ModelError("mean_pool over an all-masked sequence")
    return (x * valid.astype(np.float64)[:, None]).sum(axis=0) / count


def mlp_head(pooled: Optional[Tensor], extra: ArrayLike,
             layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Affine+ReLU layers on concat(pooled, extra); the last layer is affine only.

    With pooled=None the head sees only the extra inputs (parameters-only baseline).
    """
    h = as_tensor(extra) if pooled is None else concat([pooled, as_tensor(extra)], axis=-1)
    if h.shape[-1] != layers[0][0].shape[0]:
        raise ModelError(f"head expects input width {layers[0][0].shape[0]}, got {h.shape[-1]}")
    for i, (weight, bias) in enumerate(layers):
        h = h @ weight + bias
        if i < len(layers) - 1:
            h = h.relu()
    return h


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a vector into n identical rows (gradients sum back)."""
    return x.reshape(1, -1) + np.zeros((n, 1))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One Adam update with bias correction; params are updated in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ModelError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() with respect to array x (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CPDSECKP"
CHECKPOINT_VERSION = 1
_CONFIG_FIELDS = ("s", "d", "heads", "encoder_layers", "head_layers", "window", "vocab")


def save_checkpoint(path: Path, config: ModelConfig, tensors: dict[str, np.ndarray],
                    metadata: Optional[dict] = None) -> None:
    """Little-endian: magic, version, ModelConfig, JSON metadata, named float64 tensors."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += struct.pack("<7i", *(getattr(config, f) for f in _CONFIG_FIELDS))
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", array.ndim)
        out += struct.pack(f"<{array.ndim}I", *array.shape)
        out += array.tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ModelError(f"{path} is not a checkpoint")
    pos = len(MAGIC)
    try:
        (version,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"Unsupported checkpoint version {version}")
        values = struct.unpack_from("<7i", raw, pos)
        pos += 28
        config = ModelConfig(**dict(zip(_CONFIG_FIELDS, values)))
        (meta_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        metadata = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except struct.error as e:
        raise ModelError(f"Truncated checkpoint {path}: {e}")
    return config, tensors, metadata
