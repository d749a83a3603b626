"""Minimal dense network: forward pass, exact manual backprop, Adam.

Everything is float64 and single-threaded; determinism is part of the
contract (same seed, same trajectory, bit for bit).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"DBLB"
CHECKPOINT_VERSION = 1


class LayerShapeError(ValueError):
    """Dimension mismatch, carries the offending layer index."""

    def __init__(self, layer, expected, got):
        self.layer = layer
        super().__init__(f"layer {layer}: expected input dim {expected}, got {got}")


class CheckpointError(ValueError):
    pass


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MlpModel:
    """Dense layers (ReLU on hidden, identity on the output layer).

    `layers` holds (W, b) pairs, fan_in x fan_out each; the last pair is the
    task head. `aux_head`, when present, is a second output layer read off
    the last hidden activation (used for rotation prediction); it shares the
    whole trunk with the task head.
    """

    layers: list  # [(W, b), ...]
    aux_head: tuple | None = None  # (W, b) or None

    @property
    def input_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def n_classes(self):
        return self.layers[-1][0].shape[1]

    def params(self):
        """All parameter arrays in a fixed order (aux head last)."""
        out = []
        for W, b in self.layers:
            out.extend((W, b))
        if self.aux_head is not None:
            out.extend(self.aux_head)
        return out

    def all_finite(self):
        return all(np.isfinite(p).all() for p in self.params())

    def copy(self):
        aux = None
        if self.aux_head is not None:
            aux = (self.aux_head[0].copy(), self.aux_head[1].copy())
        return MlpModel([(W.copy(), b.copy()) for W, b in self.layers], aux)


@dataclass
class BatchGrad:
    """Gradients of the (weighted) mean batch loss.

    `logit_grads` row i is d(mean loss)/d(logits_i), i.e.
    sign * w_i * (softmax_i - onehot_i) / B for cross entropy.
    """

    layer_grads: list  # [(dW, db), ...] parallel to model.layers
    aux_grads: tuple | None
    logit_grads: np.ndarray
    mean_loss: float

    def params(self):
        out = []
        for dW, db in self.layer_grads:
            out.extend((dW, db))
        if self.aux_grads is not None:
            out.extend(self.aux_grads)
        return out

    def add_scaled(self, other: "BatchGrad", scale: float = 1.0):
        """Accumulate `scale * other` into this gradient, in place."""
        for mine, theirs in zip(self.params(), other.params()):
            mine += scale * theirs
        self.mean_loss += scale * other.mean_loss
        return self


@dataclass
class AdamState:
    """First/second moments mirroring the model parameters, plus step count."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    cfg: AdamConfig = field(default_factory=AdamConfig)


def init_mlp(input_dim, hidden_sizes, n_classes, seed, aux_classes=None):
    """Seeded init: weights uniform in +-sqrt(6/fan_in), biases zero.

    The aux head (when requested) is drawn after all task parameters, so a
    model built without it has bit-identical task parameters.
    """
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden_sizes, n_classes]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((W, np.zeros(fan_out)))
    aux = None
    if aux_classes is not None:
        fan_in = dims[-2]
        bound = np.sqrt(6.0 / fan_in)
        aux = (rng.uniform(-bound, bound, size=(fan_in, aux_classes)), np.zeros(aux_classes))
    return MlpModel(layers, aux)


def init_adam(model, cfg=None):
    cfg = cfg or AdamConfig()
    state = AdamState(cfg=cfg)
    for p in model.params():
        state.m.append(np.zeros_like(p))
        state.v.append(np.zeros_like(p))
    return state


def _trunk_forward(model, X):
    """Run the hidden layers. Returns (last hidden activation, acts, preacts)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d batch, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != model.input_dim:
        raise LayerShapeError(0, model.input_dim, X.shape[1])
    h = X
    acts = [X]
    preacts = []
    for i, (W, b) in enumerate(model.layers[:-1]):
        if h.shape[1] != W.shape[0]:
            raise LayerShapeError(i, W.shape[0], h.shape[1])
        z = h @ W + b
        preacts.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    return h, acts, preacts


def forward(model, X):
    """Task-head logits for a batch, (B, C)."""
    h, _, _ = _trunk_forward(model, X)
    W, b = model.layers[-1]
    if h.shape[1] != W.shape[0]:
        raise LayerShapeError(len(model.layers) - 1, W.shape[0], h.shape[1])
    return h @ W + b


def forward_aux(model, X):
    """Aux-head logits for a batch."""
    if model.aux_head is None:
        raise ValueError("model has no auxiliary head")
    h, _, _ = _trunk_forward(model, X)
    W, b = model.aux_head
    return h @ W + b


def softmax_probs(logits):
    """Row-wise stable softmax; accepts a single vector or a batch."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    squeeze = z.ndim == 1
    z = np.atleast_2d(z)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def prob_of_label(logits, labels):
    """p(y|f(x)) per sample."""
    p = softmax_probs(logits)
    return p[np.arange(p.shape[0]), labels]


def _backward_from_logits(model, acts, preacts, G, head):
    """Backprop a logit-gradient matrix through the chosen head and trunk."""
    head_W, _ = model.layers[-1] if head == "main" else model.aux_head
    h_last = acts[-1]
    d_head = (h_last.T @ G, G.sum(axis=0))
    delta = G @ head_W.T
    hidden_grads = [None] * (len(model.layers) - 1)
    for i in range(len(model.layers) - 2, -1, -1):
        delta = delta * (preacts[i] > 0)
        hidden_grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = delta @ model.layers[i][0].T

    layer_grads = []
    for i, (W, b) in enumerate(model.layers[:-1]):
        layer_grads.append(hidden_grads[i])
    if head == "main":
        layer_grads.append(d_head)
        aux = None
        if model.aux_head is not None:
            aux = (np.zeros_like(model.aux_head[0]), np.zeros_like(model.aux_head[1]))
    else:
        W, b = model.layers[-1]
        layer_grads.append((np.zeros_like(W), np.zeros_like(b)))
        aux = d_head
    return layer_grads, aux


def weighted_cross_entropy_backward(model, X, labels, weights, sign=1, head="main"):
    """Exact gradients of the weighted mean CE loss (1/B) sum_i w_i * l_i.

    sign = -1 negates every gradient (gradient ascent); the reported loss is
    always the unsigned weighted mean. Batch is normalized by the full batch
    size B regardless of zero weights.
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    B = X.shape[0]
    if labels.shape[0] != B or weights.shape[0] != B:
        raise ValueError("batch, labels and weights must share length")

    h, acts, preacts = _trunk_forward(model, X)
    W_head, b_head = model.layers[-1] if head == "main" else model.aux_head
    logits = h @ W_head + b_head
    C = logits.shape[1]
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")

    probs = softmax_probs(logits)
    p_label = probs[np.arange(B), labels]
    losses = -np.log(np.maximum(p_label, 1e-300))
    mean_loss = float(np.sum(weights * losses) / B)

    G = probs.copy()
    G[np.arange(B), labels] -= 1.0
    G *= (sign * weights / B)[:, None]

    layer_grads, aux = _backward_from_logits(model, acts, preacts, G, head)
    return BatchGrad(layer_grads, aux, G, mean_loss)


def gce_loss(p, q):
    """Generalized cross entropy (1 - p^q)/q and its derivative in p.

    Robust loss used by one of the scoring baselines; q in (0, 1], and the
    q->0 limit recovers plain cross entropy -log p.
    """
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("p must be positive")
    loss = (1.0 - p**q) / q
    dloss_dp = -(p ** (q - 1.0))
    if loss.ndim == 0:
        return float(loss), float(dloss_dp)
    return loss, dloss_dp


def gce_backward(model, X, labels, q):
    """Gradients of the mean GCE loss (1/B) sum_i (1 - p_i^q)/q.

    The logit gradient is p_y^q * (softmax - onehot)/B, so this rides the CE
    backward with per-sample weights p_y^q; only the reported loss differs.
    """
    logits = forward(model, X)
    p_label = prob_of_label(logits, labels)
    grad = weighted_cross_entropy_backward(model, X, labels, p_label**q, sign=1)
    losses, _ = gce_loss(np.maximum(p_label, 1e-300), q)
    grad.mean_loss = float(np.mean(losses))
    return grad


def adam_step(model, grads, state):
    """One bias-corrected Adam update, in place. Returns (model, state)."""
    cfg = state.cfg
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, g, m, v in zip(model.params(), grads.params(), state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return model, state


def zero_grads(model):
    """A BatchGrad of zeros shaped like the model (accumulation seed)."""
    layer_grads = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers]
    aux = None
    if model.aux_head is not None:
        aux = (np.zeros_like(model.aux_head[0]), np.zeros_like(model.aux_head[1]))
    return BatchGrad(layer_grads, aux, np.zeros((0, 0)), 0.0)


def save_checkpoint(path, model, state=None):
    """Versioned binary checkpoint: magic, dims, row-major f64 params,
    Adam moments appended when present. Little-endian throughout."""
    chunks = [CHECKPOINT_MAGIC]
    chunks.append(struct.pack("<IIII", CHECKPOINT_VERSION, len(model.layers),
                              1 if model.aux_head is not None else 0,
                              1 if state is not None else 0))
    for W, _ in model.layers:
        chunks.append(struct.pack("<II", *W.shape))
    if model.aux_head is not None:
        chunks.append(struct.pack("<II", *model.aux_head[0].shape))
    for p in model.params():
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    if state is not None:
        chunks.append(struct.pack("<Qdddd", state.t, state.cfg.lr, state.cfg.beta1,
                                  state.cfg.beta2, state.cfg.eps))
        for arr in state.m + state.v:
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Inverse of save_checkpoint. Returns (model, state or None)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, n_layers, has_aux, has_adam = struct.unpack_from("<IIII", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    off = 20
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", buf, off))
        off += 8
    aux_dims = None
    if has_aux:
        aux_dims = struct.unpack_from("<II", buf, off)
        off += 8

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        if off > len(buf):
            raise CheckpointError("truncated checkpoint")
        return arr

    layers = [(take(d), take((d[1],))) for d in dims]
    aux = (take(aux_dims), take((aux_dims[1],))) if has_aux else None
    model = MlpModel(layers, aux)
    state = None
    if has_adam:
        t, lr, b1, b2, eps = struct.unpack_from("<Qdddd", buf, off)
        off += 40
        state = AdamState(t=int(t), cfg=AdamConfig(lr=lr, beta1=b1, beta2=b2, eps=eps))
        shapes = [p.shape for p in model.params()]
        state.m = [take(s) for s in shapes]
        state.v = [take(s) for s in shapes]
    if off != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return model, state
