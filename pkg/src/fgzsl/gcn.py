"""Independent GCN channels that regress classifier rows over the class graph.

Each channel propagates its own node states through shared row-normalized
adjacency, ends in a d_f + 1 wide output (weights plus bias), and
L2-normalizes every output row. Channels are fit to the normalized
stage-1 classifier rows of the seen classes; the resulting rows for all
classes then replace the bank wholesale and the bank freezes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attention import ClassifierBank
from .errors import DomainError, NumericError, ShapeError, StateError
from .tensor import (
    AdamState,
    adam_step,
    as_f64,
    dropout_mask,
    leaky_relu,
    leaky_relu_grad,
)

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class KnowledgeGraph:
    """Class graph plus the per-channel initial node states.

    `class_ids` fixes the node order (seen classes first); the adjacency
    is symmetric with unit self-loops. `h0_channels` stacks one (C, d_c)
    state matrix per semantic channel, `h0_global` holds the class text
    embeddings.
    """

    class_ids: list[int]
    adjacency: np.ndarray  # (C, C)
    h0_channels: np.ndarray  # (K, C, d_c)
    h0_global: np.ndarray  # (C, d_c)

    def __post_init__(self):
        a = as_f64(self.adjacency)
        c = len(self.class_ids)
        if a.shape != (c, c):
            raise ShapeError(f"adjacency {a.shape} vs {c} classes")
        if not np.array_equal(a, a.T):
            raise DomainError("adjacency must be symmetric")
        if not np.all(np.diag(a) == 1.0):
            raise DomainError("adjacency must carry unit self-loops")
        if np.any(a < 0.0):
            raise DomainError("adjacency must be nonnegative")
        self.adjacency = a


def row_normalize(a) -> np.ndarray:
    """D^-1 A with D the row-sum degree matrix; every row sums to 1."""
    a = as_f64(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0.0):
        raise DomainError("adjacency entries must be nonnegative")
    deg = a.sum(axis=1)
    if np.any(deg <= 0.0):
        raise DomainError(f"zero-degree rows {np.flatnonzero(deg <= 0.0).tolist()}")
    return a / deg[:, None]


@dataclass
class GcnChannel:
    """Layer weights of one channel; widths chain d_c -> F... -> d_f + 1."""

    weights: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "GcnChannel":
        return GcnChannel(weights=[w.copy() for w in self.weights])


def init_channel(d_in: int, hidden: int, d_out: int, n_layers: int,
                 rng: np.random.Generator) -> GcnChannel:
    """Glorot-uniform layer stack: d_in -> hidden^(L-1) -> d_out."""
    if n_layers < 1:
        raise DomainError(f"need at least one layer, got {n_layers}")
    widths = [d_in] + [hidden] * (n_layers - 1) + [d_out]
    weights = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return GcnChannel(weights=weights)


@dataclass
class GcnStack:
    """K per-channel GCNs plus, unless ablated away, a global one."""

    channels: list[GcnChannel]
    global_channel: GcnChannel | None

    @property
    def n_channels(self) -> int:
        return len(self.channels) + (1 if self.global_channel is not None else 0)

    def all_channels(self) -> list[GcnChannel]:
        out = list(self.channels)
        if self.global_channel is not None:
            out.append(self.global_channel)
        return out

    def copy(self) -> "GcnStack":
        return GcnStack(
            channels=[c.copy() for c in self.channels],
            global_channel=None if self.global_channel is None else self.global_channel.copy(),
        )


def init_stack(k: int, d_c: int, hidden: int, d_f: int, n_layers: int,
               seed: int, use_global: bool = True) -> GcnStack:
    rng = np.random.default_rng(seed)
    channels = [init_channel(d_c, hidden, d_f + 1, n_layers, rng) for _ in range(k)]
    global_channel = init_channel(d_c, hidden, d_f + 1, n_layers, rng) if use_global else None
    return GcnStack(channels=channels, global_channel=global_channel)


@dataclass
class _ChannelCache:
    inputs: list[np.ndarray]  # H^l entering each layer (post dropout)
    pre_acts: list[np.ndarray]  # Z^l = A H^l theta^l
    masks: list[np.ndarray | None]
    raw_out: np.ndarray  # rows before normalization
    norms: np.ndarray  # max(||row||, eps)


def _forward(channel: GcnChannel, a_norm: np.ndarray, h0: np.ndarray,
             train: bool, rng, dropout: float, slope: float):
    h = as_f64(h0)
    if h.shape[1] != channel.weights[0].shape[0]:
        raise ShapeError(f"state width {h.shape[1]} vs layer {channel.weights[0].shape}")
    inputs, pre_acts, masks = [], [], []
    last = channel.n_layers - 1
    for l, theta in enumerate(channel.weights):
        inputs.append(h)
        z = a_norm @ h @ theta
        pre_acts.append(z)
        if l == last:
            h = z  # linear output layer
            masks.append(None)
        else:
            h = leaky_relu(z, slope)
            if train and dropout > 0.0:
                mask = dropout_mask(h.shape, dropout, rng, training=True)
            else:
                mask = np.ones_like(h)
            masks.append(mask)
            h = h * mask
    norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_EPS)
    out = h / norms
    return out, _ChannelCache(inputs=inputs, pre_acts=pre_acts, masks=masks,
                              raw_out=h, norms=norms)


def gcn_forward(channel: GcnChannel, a_norm, h0, train: bool = False,
                rng: np.random.Generator | None = None, dropout: float = 0.5,
                slope: float = 0.2) -> np.ndarray:
    """Propagate node states through one channel.

    Hidden layers use leaky-ReLU and, in train mode, inverted dropout;
    the output layer is linear and its rows are L2-normalized.
    """
    if train and dropout > 0.0 and rng is None:
        raise DomainError("train-mode dropout needs an rng")
    out, _ = _forward(channel, as_f64(a_norm), h0, train, rng, dropout, slope)
    return out


def _backward(channel: GcnChannel, a_norm: np.ndarray, cache: _ChannelCache,
              grad_out: np.ndarray, slope: float) -> list[np.ndarray]:
    """Gradients of every layer weight given d loss / d normalized output."""
    y = cache.raw_out / cache.norms
    g = (grad_out - np.sum(grad_out * y, axis=1, keepdims=True) * y) / cache.norms
    # rows under the eps floor divide by a constant: no projection term
    clamped = np.linalg.norm(cache.raw_out, axis=1, keepdims=True) < NORM_EPS
    if np.any(clamped):
        g = np.where(clamped, grad_out / cache.norms, g)
    grads: list[np.ndarray] = [np.zeros_like(w) for w in channel.weights]
    last = channel.n_layers - 1
    for l in range(last, -1, -1):
        if l != last:
            g = g * cache.masks[l]
            g = g * leaky_relu_grad(cache.pre_acts[l], slope)
        ah = a_norm @ cache.inputs[l]
        grads[l] = ah.T @ g
        if l > 0:
            g = a_norm.T @ (g @ channel.weights[l].T)
    return grads


def ground_truth_rows(bank: ClassifierBank, seen_positions,
                      include_global: bool = True) -> dict:
    """Normalized [weight row | bias] targets per channel for seen classes.

    Rows are L2-normalized over the full d_f + 1 vector exactly as the
    predictions are, so a perfect fit means equality after normalization.
    """
    if not bank.trained:
        raise StateError("classifier bank has not completed stage-1 training")
    pos = np.asarray(seen_positions, dtype=np.int64)

    def norm_rows(w, b):
        rows = np.concatenate([w[pos], b[pos, None]], axis=1)
        norms = np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), NORM_EPS)
        return rows / norms

    targets = {"channels": [norm_rows(bank.w_f[j], bank.b_f[j]) for j in range(bank.k)]}
    targets["global"] = norm_rows(bank.w_g, bank.b_g) if include_global else None
    return targets


def gcn_loss(predicted: list[np.ndarray], targets: list[np.ndarray],
             n_channels_total: int | None = None):
    """Squared-residual weight-fitting loss over seen rows, all channels.

    loss = sum_ch sum_rows sum_cols (target - predicted)^2
           / (2 * n_seen * n_channels);
    returns (loss, per-channel gradients wrt the predicted rows).
    """
    if len(predicted) != len(targets):
        raise ShapeError(f"{len(predicted)} prediction blocks vs {len(targets)} targets")
    if not predicted:
        raise DomainError("no channels to fit")
    n_ch = n_channels_total if n_channels_total is not None else len(predicted)
    n_seen = targets[0].shape[0]
    loss = 0.0
    grads = []
    for pred, tgt in zip(predicted, targets):
        if pred.shape != tgt.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {tgt.shape}")
        diff = pred - tgt
        loss += float((diff * diff).sum())
        grads.append(diff / (n_seen * n_ch))
    return loss / (2.0 * n_seen * n_ch), grads


def train_gcn(stack: GcnStack, graph: KnowledgeGraph, targets: dict, *,
              epochs: int = 3000, lr: float = 1e-3, weight_decay: float = 5e-4,
              dropout: float = 0.5, slope: float = 0.2, seed: int = 0,
              n_seen: int | None = None) -> list[float]:
    """Full-batch Adam on every channel; returns the per-epoch loss curve.

    Channels share no parameters and are updated independently within one
    loop. The recorded loss is the combined weight-fitting loss in eval
    mode (no dropout), so the curve is comparable across epochs.
    """
    chans = list(stack.channels)
    tgts = [targets["channels"][j] for j in range(len(stack.channels))]
    h0s = [graph.h0_channels[j] for j in range(len(stack.channels))]
    if stack.global_channel is not None:
        if targets.get("global") is None:
            raise DomainError("stack has a global channel but no global target")
        chans.append(stack.global_channel)
        tgts.append(targets["global"])
        h0s.append(graph.h0_global)
    if n_seen is None:
        n_seen = tgts[0].shape[0]
    seen = np.arange(n_seen)
    a_norm = row_normalize(graph.adjacency)
    n_ch = len(chans)
    rng = np.random.default_rng(seed)
    opt = [[AdamState(lr=lr, weight_decay=weight_decay) for _ in ch.weights] for ch in chans]

    def eval_loss() -> float:
        preds = [_forward(ch, a_norm, h0, False, None, 0.0, slope)[0][seen]
                 for ch, h0 in zip(chans, h0s)]
        return gcn_loss(preds, tgts, n_channels_total=n_ch)[0]

    curve = [eval_loss()]
    for epoch in range(epochs):
        for ch, tgt, h0, st in zip(chans, tgts, h0s, opt):
            out, cache = _forward(ch, a_norm, h0, True, rng, dropout, slope)
            diff = out[seen] - tgt
            grad_rows = np.zeros_like(out)
            grad_rows[seen] = diff / (n_seen * n_ch)
            grads = _backward(ch, a_norm, cache, grad_rows, slope)
            for i, (w, g) in enumerate(zip(ch.weights, grads)):
                ch.weights[i] = adam_step(w, g, st[i])
        loss = eval_loss()
        if not np.isfinite(loss):
            raise NumericError(f"weight-fitting loss diverged at epoch {epoch}")
        curve.append(loss)
    return curve


def channel_loss_and_grads(channel: GcnChannel, a_norm, h0, target,
                           seen_positions, n_channels_total: int,
                           slope: float = 0.2):
    """Eval-mode loss contribution and theta gradients for one channel.

    Used by the gradient-check tests; the training loop inlines the same
    computation with dropout.
    """
    a_norm = as_f64(a_norm)
    out, cache = _forward(channel, a_norm, h0, False, None, 0.0, slope)
    seen = np.asarray(seen_positions, dtype=np.int64)
    n_seen = seen.shape[0]
    diff = out[seen] - target
    loss = float((diff * diff).sum()) / (2.0 * n_seen * n_channels_total)
    grad_rows = np.zeros_like(out)
    grad_rows[seen] = diff / (n_seen * n_channels_total)
    return loss, _backward(channel, a_norm, cache, grad_rows, slope)


def predict_all_rows(stack: GcnStack, graph: KnowledgeGraph,
                     slope: float = 0.2) -> dict:
    """Eval-mode normalized rows for every class, per channel."""
    a_norm = row_normalize(graph.adjacency)
    rows = {
        "channels": [
            _forward(ch, a_norm, graph.h0_channels[j], False, None, 0.0, slope)[0]
            for j, ch in enumerate(stack.channels)
        ]
    }
    if stack.global_channel is not None:
        rows["global"] = _forward(stack.global_channel, a_norm, graph.h0_global,
                                  False, None, 0.0, slope)[0]
    else:
        rows["global"] = None
    return rows


def replace_classifiers(bank: ClassifierBank, predicted: dict) -> ClassifierBank:
    """Swap every bank row (seen and unseen) for its predicted counterpart.

    The trailing coordinate of each normalized row is the bias. The
    returned bank is frozen and fully valid.
    """
    c, d_f = bank.n_classes, bank.d_f
    blocks = predicted["channels"]
    if len(blocks) != bank.k:
        raise DomainError(f"{len(blocks)} predicted channels vs bank K={bank.k}")
    new = bank.copy()
    if predicted.get("global") is not None:
        gl = predicted["global"]
        if gl.shape[0] < c:
            missing = list(range(gl.shape[0], c))
            raise DomainError(f"predictions missing classes {missing}")
        new.w_g = gl[:c, :d_f].copy()
        new.b_g = gl[:c, d_f].copy()
    for j, block in enumerate(blocks):
        if block.shape[0] < c:
            missing = list(range(block.shape[0], c))
            raise DomainError(f"channel {j} predictions missing classes {missing}")
        new.w_f[j] = block[:c, :d_f]
        new.b_f[j] = block[:c, d_f]
    new.valid = np.ones(c, dtype=bool)
    new.frozen = True
    return new
