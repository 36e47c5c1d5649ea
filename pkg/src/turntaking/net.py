"""Stacked unidirectional LSTM with a turn head and an intent head, trained by exact BPTT.

Shapes follow a time-major convention inside the batch functions: inputs are
``(T, B, d)`` with suffix padding, and ``lengths`` says how many leading steps
of each column are real. Padded steps leave the hidden and cell state
untouched, so the state after step ``T`` is each sequence's own final state.

Gate rows inside ``W``, ``U`` and ``b`` are stacked as [input, forget, cell, output].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_TURN = 2
N_INTENT = 7
MAX_FRAMES = 2000
LOG_EPS = 1e-12

TTMD_MAGIC = b"TTMD"
TTMD_VERSION = 1


@dataclass
class LSTMLayer:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def width(self) -> int:
        return self.U.shape[1]


@dataclass
class Linear:
    W: np.ndarray
    b: np.ndarray


@dataclass
class ModelParams:
    layers: list[LSTMLayer]
    turn_head: Linear
    intent_head: Linear
    version: int = field(default=0, compare=False)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter array in checkpoint order, with a stable name."""
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.W", layer.W), (f"layer{i}.U", layer.U), (f"layer{i}.b", layer.b)]
        out += [("turn.W", self.turn_head.W), ("turn.b", self.turn_head.b)]
        out += [("intent.W", self.intent_head.W), ("intent.b", self.intent_head.b)]
        return out

    @property
    def widths(self) -> list[int]:
        return [layer.width for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def dtype(self):
        return self.layers[0].W.dtype

    @property
    def n_params(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def astype(self, dtype) -> ModelParams:
        return ModelParams(
            [LSTMLayer(l.W.astype(dtype), l.U.astype(dtype), l.b.astype(dtype)) for l in self.layers],
            Linear(self.turn_head.W.astype(dtype), self.turn_head.b.astype(dtype)),
            Linear(self.intent_head.W.astype(dtype), self.intent_head.b.astype(dtype)),
        )

    def copy(self) -> ModelParams:
        return self.astype(self.dtype)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    l_turn: float
    l_intent: float
    l_total: float


@dataclass(frozen=True)
class Prediction:
    turn_probs: np.ndarray
    intent_probs: np.ndarray

    @property
    def switch_prob(self) -> float:
        return float(self.turn_probs[1])


def init_params(
    layer_sizes: Sequence[int],
    seed: int,
    input_dim: int = 42,
    n_turn: int = N_TURN,
    n_intent: int = N_INTENT,
    dtype=np.float32,
) -> ModelParams:
    """Uniform(-1/sqrt(h), 1/sqrt(h)) weights, forget-gate bias 1, other biases 0."""
    if not layer_sizes or any(int(h) < 1 for h in layer_sizes):
        raise ValueError(f"invalid layer sizes {layer_sizes!r}")
    if input_dim < 1 or n_turn < 2 or n_intent < 2:
        raise ValueError("invalid input or head dimensions")
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for h in layer_sizes:
        k = 1.0 / np.sqrt(h)
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        layers.append(LSTMLayer(
            rng.uniform(-k, k, (4 * h, d)).astype(dtype),
            rng.uniform(-k, k, (4 * h, h)).astype(dtype),
            b.astype(dtype),
        ))
        d = h
    k = 1.0 / np.sqrt(d)
    turn = Linear(rng.uniform(-k, k, (n_turn, d)).astype(dtype), np.zeros(n_turn, dtype))
    intent = Linear(rng.uniform(-k, k, (n_intent, d)).astype(dtype), np.zeros(n_intent, dtype))
    return ModelParams(layers, turn, intent)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def lstm_cell(x_t, h_prev, c_prev, layer: LSTMLayer) -> tuple[np.ndarray, np.ndarray]:
    h = layer.width
    z = layer.W @ x_t + layer.U @ h_prev + layer.b
    i, f, o = _sigmoid(z[:h]), _sigmoid(z[h:2 * h]), _sigmoid(z[3 * h:])
    g = np.tanh(z[2 * h:3 * h])
    c_t = f * c_prev + i * g
    return o * np.tanh(c_t), c_t


def pad_batch(seqs: Sequence[np.ndarray], max_frames: int = MAX_FRAMES, dtype=np.float32):
    """Stack sequences into a time-major (T, B, d) array with suffix padding.

    Sequences longer than ``max_frames`` keep their final frames.
    """
    seqs = [s[-max_frames:] for s in seqs]
    lengths = np.array([len(s) for s in seqs])
    if (lengths < 1).any():
        raise ValueError("empty sequence in batch")
    T, d = lengths.max(), seqs[0].shape[1]
    X = np.zeros((T, len(seqs), d), dtype=dtype)
    for j, s in enumerate(seqs):
        X[:len(s), j] = s
    return X, lengths


@dataclass
class _LayerTrace:
    X: np.ndarray
    H: np.ndarray
    C: np.ndarray
    gates: np.ndarray
    tanh_c: np.ndarray


@dataclass
class ForwardCache:
    params: ModelParams
    version: int
    mask: np.ndarray | None
    traces: list[_LayerTrace]
    h_final: np.ndarray
    turn_probs: np.ndarray
    intent_probs: np.ndarray
    consumed: bool = False


def _layer_forward(layer: LSTMLayer, X: np.ndarray, mask: np.ndarray | None, keep: bool) -> _LayerTrace:
    T, B, _ = X.shape
    h = layer.width
    zx = X @ layer.W.T + layer.b
    H = np.zeros((T + 1, B, h), dtype=X.dtype)
    C = np.zeros((T + 1, B, h), dtype=X.dtype)
    gates = np.empty((T, B, 4 * h), dtype=X.dtype) if keep else None
    tanh_c = np.empty((T, B, h), dtype=X.dtype) if keep else None
    UT = layer.U.T
    for t in range(T):
        z = zx[t] + H[t] @ UT
        a = _sigmoid(z)
        a[:, 2 * h:3 * h] = np.tanh(z[:, 2 * h:3 * h])
        c_new = a[:, h:2 * h] * C[t] + a[:, :h] * a[:, 2 * h:3 * h]
        tc = np.tanh(c_new)
        h_new = a[:, 3 * h:] * tc
        if mask is None:
            C[t + 1] = c_new
            H[t + 1] = h_new
        else:
            m = mask[t]
            C[t + 1] = np.where(m, c_new, C[t])
            H[t + 1] = np.where(m, h_new, H[t])
        if keep:
            gates[t] = a
            tanh_c[t] = tc
    return _LayerTrace(X, H, C, gates, tanh_c)


def _make_mask(lengths: np.ndarray, T: int) -> np.ndarray | None:
    if (lengths == T).all():
        return None
    return (np.arange(T)[:, None] < lengths[None, :])[:, :, None]


def forward_batch(params: ModelParams, X: np.ndarray, lengths: np.ndarray, keep: bool = True):
    """Run the stack over a padded batch; returns (turn_probs, intent_probs, cache)."""
    if X.ndim != 3 or X.shape[2] != params.input_dim:
        raise ValueError(f"expected input of shape (T, B, {params.input_dim}), got {X.shape}")
    X = X.astype(params.dtype, copy=False)
    mask = _make_mask(np.asarray(lengths), X.shape[0])
    traces = []
    inp = X
    for layer in params.layers:
        tr = _layer_forward(layer, inp, mask, keep)
        traces.append(tr)
        inp = tr.H[1:]
    h_final = traces[-1].H[-1]
    turn = _softmax(h_final @ params.turn_head.W.T + params.turn_head.b)
    intent = _softmax(h_final @ params.intent_head.W.T + params.intent_head.b)
    cache = ForwardCache(params, params.version, mask, traces, h_final, turn, intent) if keep else None
    return turn, intent, cache


def forward(seq: np.ndarray, params: ModelParams) -> tuple[Prediction, ForwardCache]:
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[1] != params.input_dim or seq.shape[0] < 1:
        raise ValueError(f"expected a (n, {params.input_dim}) frame matrix, got {seq.shape}")
    X, lengths = pad_batch([seq], dtype=params.dtype)
    turn, intent, cache = forward_batch(params, X, lengths)
    return Prediction(turn[0], intent[0]), cache


def predict(seq: np.ndarray, params: ModelParams) -> Prediction:
    pred, _ = forward(seq, params)
    return pred


def predict_batch(params: ModelParams, seqs: Sequence[np.ndarray], batch_size: int = 256):
    """Probabilities for many sequences; batches are formed from length-sorted order."""
    n = len(seqs)
    turn = np.empty((n, params.turn_head.b.size))
    intent = np.empty((n, params.intent_head.b.size))
    order = np.argsort([min(len(s), MAX_FRAMES) for s in seqs], kind="stable")
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        X, lengths = pad_batch([seqs[i] for i in idx], dtype=params.dtype)
        t, it, _ = forward_batch(params, X, lengths, keep=False)
        turn[idx] = t
        intent[idx] = it
    return turn, intent


def weighted_nll(probs, true_class, class_weights) -> np.ndarray:
    """-w[y] * log(p[y] + 1e-12), elementwise over a batch if given one."""
    probs = np.asarray(probs)
    y = np.asarray(true_class)
    w = np.asarray(class_weights)[y]
    p_true = np.take_along_axis(np.atleast_2d(probs), np.atleast_1d(y)[:, None], axis=1)[:, 0]
    out = -w * np.log(p_true + LOG_EPS)
    return out if probs.ndim > 1 else out[0]


def joint_loss(pred: Prediction, turn_label: int, intent_label: int,
               weights: LossWeights, class_weights) -> LossBreakdown:
    """Combine turn and intent NLL; ``class_weights`` is (turn_weights, intent_weights)."""
    l_turn = float(weighted_nll(pred.turn_probs, turn_label, class_weights[0]))
    l_intent = float(weighted_nll(pred.intent_probs, intent_label, class_weights[1]))
    return LossBreakdown(l_turn, l_intent, weights.lambda1 * l_turn + weights.lambda2 * l_intent)


def _head_grad(probs, y, w, scale):
    """d(scale * mean_b -w[y] log(p[y] + eps)) / d logits."""
    B = probs.shape[0]
    rows = np.arange(B)
    p_true = probs[rows, y]
    coef = scale * w[y] * p_true / (p_true + LOG_EPS) / B
    d = probs * coef[:, None]
    d[rows, y] -= coef
    return d


def _layer_backward(layer: LSTMLayer, tr: _LayerTrace, mask, dH, dh_last):
    T, B, _ = tr.X.shape
    h = layer.width
    dz_all = np.empty((T, B, 4 * h), dtype=tr.X.dtype)
    dh_next = dh_last.astype(tr.X.dtype)
    dc_next = np.zeros((B, h), dtype=tr.X.dtype)
    U = layer.U
    for t in range(T - 1, -1, -1):
        dh = dh_next if dH is None else dH[t] + dh_next
        dc = dc_next
        if mask is not None:
            m = mask[t]
            dh_keep = np.where(m, 0, dh)
            dc_keep = np.where(m, 0, dc)
            dh = np.where(m, dh, 0)
            dc = np.where(m, dc, 0)
        a = tr.gates[t]
        i, f, g, o = a[:, :h], a[:, h:2 * h], a[:, 2 * h:3 * h], a[:, 3 * h:]
        tc = tr.tanh_c[t]
        dc = dc + dh * o * (1 - tc * tc)
        dz = dz_all[t]
        dz[:, :h] = dc * g * i * (1 - i)
        dz[:, h:2 * h] = dc * tr.C[t] * f * (1 - f)
        dz[:, 2 * h:3 * h] = dc * i * (1 - g * g)
        dz[:, 3 * h:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dh_next = dz @ U
        if mask is not None:
            dc_next = dc_next + dc_keep
            dh_next = dh_next + dh_keep
    flat = dz_all.reshape(T * B, 4 * h)
    grad = LSTMLayer(
        flat.T @ tr.X.reshape(T * B, -1),
        flat.T @ tr.H[:-1].reshape(T * B, h),
        flat.sum(axis=0),
    )
    return grad, dz_all @ layer.W


def batch_loss(turn_probs, intent_probs, turn_y, intent_y, weights: LossWeights,
               class_weights, single_task: bool = False) -> LossBreakdown:
    l_turn = float(np.mean(weighted_nll(turn_probs, turn_y, class_weights[0])))
    if single_task:
        return LossBreakdown(l_turn, 0.0, weights.lambda1 * l_turn)
    l_intent = float(np.mean(weighted_nll(intent_probs, intent_y, class_weights[1])))
    return LossBreakdown(l_turn, l_intent, weights.lambda1 * l_turn + weights.lambda2 * l_intent)


def backward(cache: ForwardCache | None, turn_y, intent_y, weights: LossWeights, class_weights,
             single_task: bool = False) -> tuple[ModelParams, LossBreakdown]:
    """Exact gradients of the batch-mean joint loss for every parameter.

    ``single_task`` drops the intent branch entirely rather than weighting it
    by zero; both give identical turn-path gradients.
    """
    if cache is None:
        raise ValueError("backward needs the cache from forward")
    if cache.consumed or cache.version != cache.params.version:
        raise ValueError("stale forward cache: parameters changed or cache already used")
    cache.consumed = True
    params = cache.params
    dtype = params.dtype
    turn_y = np.atleast_1d(np.asarray(turn_y))
    intent_y = np.atleast_1d(np.asarray(intent_y))
    tw = np.asarray(class_weights[0], dtype=dtype)
    iw = np.asarray(class_weights[1], dtype=dtype)
    loss = batch_loss(cache.turn_probs, cache.intent_probs, turn_y, intent_y, weights,
                      class_weights, single_task)

    h_final = cache.h_final
    d_turn = _head_grad(cache.turn_probs, turn_y, tw, dtype.type(weights.lambda1))
    turn_grad = Linear(d_turn.T @ h_final, d_turn.sum(axis=0))
    dh = d_turn @ params.turn_head.W
    if single_task:
        intent_grad = Linear(np.zeros_like(params.intent_head.W), np.zeros_like(params.intent_head.b))
    else:
        d_int = _head_grad(cache.intent_probs, intent_y, iw, dtype.type(weights.lambda2))
        intent_grad = Linear(d_int.T @ h_final, d_int.sum(axis=0))
        dh = dh + d_int @ params.intent_head.W

    layer_grads = [None] * len(params.layers)
    dH = None
    for k in range(len(params.layers) - 1, -1, -1):
        layer_grads[k], dH = _layer_backward(params.layers[k], cache.traces[k], cache.mask, dH, dh)
        if k > 0:
            # lower layers get gradient only through the sequence of outputs above them
            dh = np.zeros((dh.shape[0], params.layers[k - 1].width), dtype=dh.dtype)
    return ModelParams(layer_grads, turn_grad, intent_grad), loss


def loss_and_grads(params: ModelParams, seqs: Sequence[np.ndarray], turn_y, intent_y,
                   weights: LossWeights, class_weights, single_task: bool = False):
    X, lengths = pad_batch(seqs, dtype=params.dtype)
    _, _, cache = forward_batch(params, X, lengths)
    grads, loss = backward(cache, turn_y, intent_y, weights, class_weights, single_task)
    return loss, grads


# -- TTMD checkpoints ---------------------------------------------------------

@dataclass
class ModelFile:
    params: ModelParams
    turn_weights: np.ndarray
    intent_weights: np.ndarray
    loss_weights: LossWeights


def save_model(path: str | Path, params: ModelParams, turn_weights, intent_weights,
               loss_weights: LossWeights) -> None:
    """Write a TTMD checkpoint.

    Layout (little-endian): b"TTMD", u32 version, u32 n_layers, u32 width per
    layer, u32 input_dim, u32 n_turn, u32 n_intent, then float32 tensors in
    ``ModelParams.tensors()`` order (row-major), float32 turn and intent class
    weights, and float64 lambda1, lambda2.
    """
    widths = params.widths
    n_turn, n_intent = params.turn_head.b.size, params.intent_head.b.size
    parts = [TTMD_MAGIC, struct.pack(f"<II{len(widths)}IIII", TTMD_VERSION, len(widths), *widths,
                                     params.input_dim, n_turn, n_intent)]
    for _, t in params.tensors():
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    parts.append(np.asarray(turn_weights, dtype="<f4").reshape(n_turn).tobytes())
    parts.append(np.asarray(intent_weights, dtype="<f4").reshape(n_intent).tobytes())
    parts.append(struct.pack("<dd", loss_weights.lambda1, loss_weights.lambda2))
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> ModelFile:
    blob = Path(path).read_bytes()
    if blob[:4] != TTMD_MAGIC:
        raise ValueError(f"{path}: not a TTMD checkpoint")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != TTMD_VERSION:
        raise ValueError(f"{path}: unsupported TTMD version {version}")
    if n_layers < 1:
        raise ValueError(f"{path}: bad layer count")
    off = 12
    widths = struct.unpack_from(f"<{n_layers}I", blob, off)
    off += 4 * n_layers
    input_dim, n_turn, n_intent = struct.unpack_from("<III", blob, off)
    off += 12

    def take(*shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        return arr

    layers, d = [], input_dim
    for h in widths:
        layers.append(LSTMLayer(take(4 * h, d), take(4 * h, h), take(4 * h)))
        d = h
    turn = Linear(take(n_turn, d), take(n_turn))
    intent = Linear(take(n_intent, d), take(n_intent))
    tw, iw = take(n_turn), take(n_intent)
    l1, l2 = struct.unpack_from("<dd", blob, off)
    if off + 16 != len(blob):
        raise ValueError(f"{path}: trailing or missing bytes")
    return ModelFile(ModelParams(layers, turn, intent), tw, iw, LossWeights(l1, l2))
