"""Per-centroid attention over region features and its analytic gradients.

One sample is an R x d_f grid of region features. Each semantic centroid
queries the grid through a shared bilinear map, the resulting softmax
weights select a per-channel feature, and logits combine a global
classifier on the mean-pooled grid with one classifier per channel. A
self-calibration term regresses a scalar projection of each channel
feature onto the class-to-centroid cosine distance.

Gradients for every trainable tensor are derived by hand and checked
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FreezeError, ShapeError
from .tensor import as_f64, log_softmax, softmax_last

HEATMAP_FLOAT_FORMAT = repr  # shortest round-trip formatting, exact re-parse


@dataclass
class RegionFeatureGrid:
    """R x d_f matrix of region features for one sample."""

    sample_id: int
    features: np.ndarray  # (R, d_f)
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.features = as_f64(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"region grid must be (R, d_f), got {self.features.shape}")
        if self.grid_shape is not None:
            h, w = self.grid_shape
            if h * w != self.features.shape[0]:
                raise ShapeError(
                    f"grid shape {self.grid_shape} does not cover {self.features.shape[0]} regions"
                )


@dataclass
class AttentionParams:
    """Bilinear map aligning centroid queries with region features."""

    w_alpha: np.ndarray  # (d_c, d_f)

    def __post_init__(self):
        self.w_alpha = as_f64(self.w_alpha)
        if self.w_alpha.ndim != 2:
            raise ShapeError(f"w_alpha must be 2-D, got {self.w_alpha.shape}")


@dataclass
class CalibrationHead:
    """Scalar projection of channel features for the calibration loss."""

    w_sc: np.ndarray  # (d_f,)

    def __post_init__(self):
        self.w_sc = as_f64(self.w_sc).reshape(-1)


@dataclass
class FeatureAdapter:
    """Square map applied to every region row; identity at initialization.

    Stands in for backbone fine-tuning: frozen while the classifiers are
    learned, trained in the final fine-tuning stage.
    """

    matrix: np.ndarray  # (d_f, d_f)
    frozen: bool = True

    @classmethod
    def identity(cls, d_f: int, frozen: bool = True) -> "FeatureAdapter":
        return cls(matrix=np.eye(d_f, dtype=np.float64), frozen=frozen)

    def __post_init__(self):
        self.matrix = as_f64(self.matrix)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeError(f"adapter must be square, got {self.matrix.shape}")

    def apply(self, features: np.ndarray) -> np.ndarray:
        return features @ self.matrix


@dataclass
class ClassifierBank:
    """Global plus per-channel linear classifiers over all classes.

    Rows are positional in the canonical (seen-first) class order. Only
    rows flagged valid may be scored; graph regression fills the rest and
    freezes the bank.
    """

    w_g: np.ndarray  # (C, d_f)
    b_g: np.ndarray  # (C,)
    w_f: np.ndarray  # (K, C, d_f)
    b_f: np.ndarray  # (K, C)
    valid: np.ndarray  # (C,) bool
    frozen: bool = False
    trained: bool = False

    @classmethod
    def init(cls, n_classes: int, d_f: int, k: int, rng: np.random.Generator,
             valid_rows=None) -> "ClassifierBank":
        scale = 1.0 / np.sqrt(d_f)
        valid = np.zeros(n_classes, dtype=bool)
        if valid_rows is not None:
            valid[list(valid_rows)] = True
        return cls(
            w_g=rng.normal(0.0, scale, size=(n_classes, d_f)),
            b_g=np.zeros(n_classes, dtype=np.float64),
            w_f=rng.normal(0.0, scale, size=(k, n_classes, d_f)),
            b_f=np.zeros((k, n_classes), dtype=np.float64),
            valid=valid,
        )

    @property
    def n_classes(self) -> int:
        return self.w_g.shape[0]

    @property
    def d_f(self) -> int:
        return self.w_g.shape[1]

    @property
    def k(self) -> int:
        return self.w_f.shape[0]

    def assert_mutable(self):
        if self.frozen:
            raise FreezeError("classifier bank is frozen")

    def copy(self) -> "ClassifierBank":
        return ClassifierBank(
            w_g=self.w_g.copy(), b_g=self.b_g.copy(),
            w_f=self.w_f.copy(), b_f=self.b_f.copy(),
            valid=self.valid.copy(), frozen=self.frozen, trained=self.trained,
        )


@dataclass
class FineGrainedFeatures:
    """Forward products of one sample: pooled global feature, per-channel
    attended features, and the attention maps that produced them."""

    e_g: np.ndarray  # (d_f,)
    e_k: np.ndarray  # (K, d_f)
    alphas: np.ndarray  # (K, R)
    grid_shape: tuple[int, int] | None = None


def attention_weights(centroid, grid: RegionFeatureGrid, params: AttentionParams,
                      adapter: FeatureAdapter | None = None) -> np.ndarray:
    """Softmax over region scores s_r = centroid . (w_alpha f_r)."""
    v = as_f64(centroid)
    feats = grid.features if adapter is None else adapter.apply(grid.features)
    if v.shape[0] != params.w_alpha.shape[0]:
        raise ShapeError(f"centroid dim {v.shape[0]} vs w_alpha {params.w_alpha.shape}")
    if feats.shape[1] != params.w_alpha.shape[1]:
        raise ShapeError(f"feature dim {feats.shape[1]} vs w_alpha {params.w_alpha.shape}")
    scores = feats @ (params.w_alpha.T @ v)
    return softmax_last(scores)


def fine_grained_feature(weights, grid: RegionFeatureGrid,
                         adapter: FeatureAdapter | None = None) -> np.ndarray:
    """Attention-weighted sum of region rows."""
    w = as_f64(weights)
    feats = grid.features if adapter is None else adapter.apply(grid.features)
    if w.shape[0] != feats.shape[0]:
        raise ShapeError(f"{w.shape[0]} weights vs {feats.shape[0]} regions")
    return w @ feats


def extract_features(grid: RegionFeatureGrid, centroids, params: AttentionParams,
                     adapter: FeatureAdapter | None = None) -> FineGrainedFeatures:
    """Full per-sample forward: global mean pool plus every channel."""
    cents = np.atleast_2d(as_f64(centroids))
    feats = grid.features if adapter is None else adapter.apply(grid.features)
    pre = RegionFeatureGrid(grid.sample_id, feats, grid.grid_shape)
    if cents.shape[0]:
        alphas = np.stack([attention_weights(c, pre, params) for c in cents])
        e_k = alphas @ feats
    else:
        alphas = np.zeros((0, feats.shape[0]))
        e_k = np.zeros((0, feats.shape[1]))
    return FineGrainedFeatures(
        e_g=feats.mean(axis=0), e_k=e_k, alphas=alphas, grid_shape=grid.grid_shape
    )


def self_calibration_loss(features: FineGrainedFeatures, head: CalibrationHead,
                          targets) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared gap between ReLU(e_k . w_sc) and the per-channel target.

    Returns (loss, grad wrt each e_k, grad wrt w_sc); the ReLU subgradient
    at the kink is 0. K = 0 yields a zero loss and empty gradients.
    """
    dis = as_f64(targets).reshape(-1)
    k = features.e_k.shape[0]
    if dis.shape[0] != k:
        raise ShapeError(f"{k} channel features vs {dis.shape[0]} targets")
    if k == 0:
        return 0.0, np.zeros_like(features.e_k), np.zeros_like(head.w_sc)
    z = features.e_k @ head.w_sc
    a = np.maximum(z, 0.0)
    resid = a - dis
    loss = float(resid @ resid) / (2.0 * k)
    gate = (z > 0.0).astype(np.float64)
    gz = resid * gate / k
    grad_e = gz[:, None] * head.w_sc[None, :]
    grad_w = gz @ features.e_k
    return loss, grad_e, grad_w


def compose_logits(features: FineGrainedFeatures, bank: ClassifierBank,
                   label_space, use_global: bool = True) -> np.ndarray:
    """Per-class scores over `label_space` (positional class indices)."""
    ls = np.asarray(label_space, dtype=np.int64)
    missing = ls[~bank.valid[ls]]
    if missing.size:
        raise DomainError(f"no classifier rows for classes {missing.tolist()}")
    if features.e_k.shape[0] != bank.k:
        raise ShapeError(f"{features.e_k.shape[0]} channel features vs bank K={bank.k}")
    logits = np.zeros(ls.shape[0], dtype=np.float64)
    if use_global:
        logits += bank.w_g[ls] @ features.e_g + bank.b_g[ls]
    for j in range(bank.k):
        logits += bank.w_f[j, ls] @ features.e_k[j] + bank.b_f[j, ls]
    return logits


def cross_entropy(logits, true_index: int) -> tuple[float, np.ndarray]:
    """Negative log softmax probability of the true class, log-sum-exp
    stabilized; the gradient is softmax(logits) - onehot."""
    o = as_f64(logits).reshape(-1)
    if o.size == 0:
        raise DomainError("empty logits")
    if not 0 <= true_index < o.size:
        raise DomainError(f"label index {true_index} out of range for {o.size} logits")
    logp = log_softmax(o)
    grad = np.exp(logp)
    grad[true_index] -= 1.0
    return float(-logp[true_index]), grad


@dataclass
class Stage1Batch:
    """Vectorized batch view consumed by the stage-1 forward/backward."""

    features: np.ndarray  # (B, R, d_f) raw region features
    label_positions: np.ndarray  # (B,) positions within the label space
    label_space: np.ndarray  # (n_ls,) class indices, ascending
    dis_targets: np.ndarray  # (B, K) calibration targets of each true class


@dataclass
class Stage1Grads:
    w_alpha: np.ndarray
    w_sc: np.ndarray
    adapter: np.ndarray
    w_g: np.ndarray
    b_g: np.ndarray
    w_f: np.ndarray
    b_f: np.ndarray


@dataclass
class _Stage1Cache:
    batch: Stage1Batch
    adapted: np.ndarray  # (B, R, d_f)
    queries: np.ndarray  # (K, d_f)
    alphas: np.ndarray  # (B, K, R)
    e_k: np.ndarray  # (B, K, d_f)
    e_g: np.ndarray  # (B, d_f)
    z: np.ndarray  # (B, K)
    probs: np.ndarray  # (B, n_ls)
    lambda_sc: float
    use_global: bool


def batch_feature_forward(features, centroids, params: AttentionParams,
                          adapter: FeatureAdapter):
    """Attention forward over a stacked batch.

    Returns (adapted, queries, alphas, e_k, e_g) with shapes
    (B, R, d_f), (K, d_f), (B, K, R), (B, K, d_f), (B, d_f).
    """
    feats = as_f64(features)
    b, r, d_f = feats.shape
    k = centroids.shape[0] if centroids.size else 0
    adapted = feats @ adapter.matrix
    queries = centroids @ params.w_alpha if k else np.zeros((0, d_f))
    if k:
        scores = np.einsum("brd,kd->bkr", adapted, queries)
        alphas = softmax_last(scores)
        e_k = np.einsum("bkr,brd->bkd", alphas, adapted)
    else:
        alphas = np.zeros((b, 0, r))
        e_k = np.zeros((b, 0, d_f))
    return adapted, queries, alphas, e_k, adapted.mean(axis=1)


def batch_logits(features, centroids, params: AttentionParams,
                 adapter: FeatureAdapter, bank: ClassifierBank, label_space,
                 use_global: bool = True) -> np.ndarray:
    """Class scores for a stacked batch over `label_space` positions."""
    ls = np.asarray(label_space, dtype=np.int64)
    missing = ls[~bank.valid[ls]]
    if missing.size:
        raise DomainError(f"no classifier rows for classes {missing.tolist()}")
    _, _, _, e_k, e_g = batch_feature_forward(features, centroids, params, adapter)
    logits = np.zeros((e_g.shape[0], ls.shape[0]), dtype=np.float64)
    if use_global:
        logits += e_g @ bank.w_g[ls].T + bank.b_g[ls]
    for j in range(e_k.shape[1]):
        logits += e_k[:, j, :] @ bank.w_f[j, ls].T + bank.b_f[j, ls]
    return logits


def stage1_forward(
    batch: Stage1Batch,
    centroids: np.ndarray,
    params: AttentionParams,
    head: CalibrationHead,
    adapter: FeatureAdapter,
    bank: ClassifierBank,
    lambda_sc: float = 1.0,
    use_global: bool = True,
) -> tuple[float, float, float, _Stage1Cache]:
    """Batched forward pass. Returns (total, cross-entropy, calibration, cache).

    Total is mean cross-entropy plus lambda times mean calibration loss.
    """
    b = batch.features.shape[0]
    k = centroids.shape[0] if centroids.size else 0
    adapted, queries, alphas, e_k, e_g = batch_feature_forward(
        batch.features, centroids, params, adapter)

    ls = batch.label_space
    logits = np.zeros((b, ls.shape[0]), dtype=np.float64)
    if use_global:
        logits += e_g @ bank.w_g[ls].T + bank.b_g[ls]
    for j in range(k):
        logits += e_k[:, j, :] @ bank.w_f[j, ls].T + bank.b_f[j, ls]
    logp = log_softmax(logits)
    ce = float(-logp[np.arange(b), batch.label_positions].mean())

    if k:
        z = e_k @ head.w_sc
        resid = np.maximum(z, 0.0) - batch.dis_targets
        sc = float((resid * resid).sum() / (2.0 * k * b))
    else:
        z = np.zeros((b, 0))
        sc = 0.0

    cache = _Stage1Cache(
        batch=batch, adapted=adapted, queries=queries, alphas=alphas,
        e_k=e_k, e_g=e_g, z=z, probs=np.exp(logp),
        lambda_sc=lambda_sc, use_global=use_global,
    )
    return ce + lambda_sc * sc, ce, sc, cache


def backward_stage1(
    cache: _Stage1Cache,
    centroids: np.ndarray,
    params: AttentionParams,
    head: CalibrationHead,
    adapter: FeatureAdapter,
    bank: ClassifierBank,
) -> Stage1Grads:
    """Analytic gradients of the batched stage-1 loss.

    Frozen structures (the bank, the adapter) report zero gradients so
    optimizers can apply updates unconditionally.
    """
    batch = cache.batch
    b, r, d_f = cache.adapted.shape
    k = cache.e_k.shape[1]
    ls = batch.label_space

    g_o = cache.probs.copy()
    g_o[np.arange(b), batch.label_positions] -= 1.0
    g_o /= b

    grad_w_g = np.zeros_like(bank.w_g)
    grad_b_g = np.zeros_like(bank.b_g)
    grad_w_f = np.zeros_like(bank.w_f)
    grad_b_f = np.zeros_like(bank.b_f)
    g_e = np.zeros_like(cache.e_k)  # (B, K, d_f)
    g_eg = np.zeros_like(cache.e_g)  # (B, d_f)

    if cache.use_global:
        if not bank.frozen:
            grad_w_g[ls] = g_o.T @ cache.e_g
            grad_b_g[ls] = g_o.sum(axis=0)
        g_eg = g_o @ bank.w_g[ls]
    for j in range(k):
        if not bank.frozen:
            grad_w_f[j, ls] = g_o.T @ cache.e_k[:, j, :]
            grad_b_f[j, ls] = g_o.sum(axis=0)
        g_e[:, j, :] = g_o @ bank.w_f[j, ls]

    if k:
        gate = (cache.z > 0.0).astype(np.float64)
        resid = np.maximum(cache.z, 0.0) - batch.dis_targets
        g_z = cache.lambda_sc * resid * gate / (k * b)  # (B, K)
        grad_w_sc = np.einsum("bk,bkd->d", g_z, cache.e_k)
        g_e += g_z[:, :, None] * head.w_sc[None, None, :]
    else:
        grad_w_sc = np.zeros_like(head.w_sc)

    if k:
        g_alpha = np.einsum("bkd,brd->bkr", g_e, cache.adapted)
        inner = np.sum(cache.alphas * g_alpha, axis=2, keepdims=True)
        g_s = cache.alphas * (g_alpha - inner)  # softmax Jacobian
        grad_q = np.einsum("bkr,brd->kd", g_s, cache.adapted)
        grad_w_alpha = centroids.T @ grad_q
        g_feat = (
            np.einsum("bkr,kd->brd", g_s, cache.queries)
            + np.einsum("bkr,bkd->brd", cache.alphas, g_e)
        )
    else:
        grad_w_alpha = np.zeros_like(params.w_alpha)
        g_feat = np.zeros_like(cache.adapted)
    g_feat += g_eg[:, None, :] / r

    if adapter.frozen:
        grad_adapter = np.zeros_like(adapter.matrix)
    else:
        grad_adapter = np.einsum("brc,brd->cd", as_f64(batch.features), g_feat)

    return Stage1Grads(
        w_alpha=grad_w_alpha, w_sc=grad_w_sc, adapter=grad_adapter,
        w_g=grad_w_g, b_g=grad_b_g, w_f=grad_w_f, b_f=grad_b_f,
    )


def export_attention_heatmap(features: FineGrainedFeatures, channel: int, out_base) -> list[str]:
    """Write one channel's attention map as `<out_base>.csv` and `<out_base>.pgm`.

    The CSV holds full-precision decimals, one grid row per line; the PGM
    is binary 8-bit, min-max scaled (a constant map renders black). Both
    are byte-deterministic for a given input. Returns the written paths.
    """
    if features.grid_shape is None:
        raise DomainError("grid shape unknown; cannot lay out heatmap")
    if not 0 <= channel < features.alphas.shape[0]:
        raise DomainError(f"channel {channel} out of range")
    h, w = features.grid_shape
    alpha = features.alphas[channel].reshape(h, w)

    csv_path = f"{out_base}.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in alpha:
            fh.write(",".join(HEATMAP_FLOAT_FORMAT(float(x)) for x in row))
            fh.write("\n")

    lo, hi = float(alpha.min()), float(alpha.max())
    if hi > lo:
        scaled = np.round((alpha - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros((h, w), dtype=np.uint8)
    pgm_path = f"{out_base}.pgm"
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return [csv_path, pgm_path]


def read_heatmap_csv(path) -> np.ndarray:
    """Inverse of the CSV side of export_attention_heatmap."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split(",")])
    return np.array(rows, dtype=np.float64)
