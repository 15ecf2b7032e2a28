"""End-to-end orchestration: two fine-tuning stages around the graph fit.

Stage 1 trains attention, calibration, and the seen-class classifiers
with Adam. The graph stage regresses every class's classifier rows from
the class graph and freezes the bank. Stage 2 fine-tunes the feature
adapter with momentum SGD against the frozen bank. Evaluation, the
ablation variants, and the K/L sweep all run through the same path.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import semantic
from .attention import (
    AttentionParams,
    CalibrationHead,
    ClassifierBank,
    FeatureAdapter,
    Stage1Batch,
    backward_stage1,
    batch_logits,
    stage1_forward,
)
from .data import LoadedDataset, load_checkpoint, save_checkpoint
from .errors import DomainError, NumericError
from .gcn import (
    GcnChannel,
    GcnStack,
    KnowledgeGraph,
    ground_truth_rows,
    init_stack,
    predict_all_rows,
    replace_classifiers,
    train_gcn,
)
from .tensor import AdamState, SgdState, adam_step, sgd_momentum_step

log = logging.getLogger(__name__)

DEFAULT_TOPK = (1, 2, 5, 10, 20)


@dataclass
class PipelineConfig:
    """Every knob of the pipeline with its documented default."""

    k_channels: int = 3
    gcn_layers: int = 2
    lambda_sc: float = 1.0
    stage1_epochs: int = 30
    stage1_lr: float = 1e-3
    stage1_weight_decay: float = 0.0
    batch_size: int = 64
    gcn_epochs: int = 3000
    gcn_lr: float = 1e-3
    gcn_weight_decay: float = 5e-4
    gcn_dropout: float = 0.5
    gcn_hidden: int = 2048
    stage2_epochs: int = 20
    stage2_lr: float = 1e-4
    stage2_momentum: float = 0.9
    stage2_train_attention: bool = False
    leaky_slope: float = 0.2
    seed: int = 0
    eval_mode: str = "zsl"
    topk: tuple[int, ...] = DEFAULT_TOPK
    use_global: bool = True
    skip_stage1: bool = False
    skip_stage2: bool = False
    kmeans_restarts: int = 5
    kmeans_max_iters: int = 300
    kmeans_tol: float = 1e-6
    cluster_unseen_phrases: bool = False
    calibrate_to_similarity: bool = False

    def __post_init__(self):
        if self.k_channels < 0:
            raise DomainError(f"k_channels must be >= 0, got {self.k_channels}")
        if self.gcn_layers < 1:
            raise DomainError(f"gcn_layers must be >= 1, got {self.gcn_layers}")
        for name in ("stage1_lr", "gcn_lr", "stage2_lr"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.eval_mode not in ("zsl", "gzsl"):
            raise DomainError(f"eval_mode must be 'zsl' or 'gzsl', got {self.eval_mode!r}")
        if self.k_channels == 0 and not self.use_global:
            raise DomainError("k_channels=0 with use_global=False leaves no classifier")
        self.topk = tuple(int(k) for k in self.topk)

    def to_dict(self) -> dict:
        out = {}
        for key, value in vars(self).items():
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise DomainError(f"unknown config keys: {unknown}")
        return cls(**doc)


class AblationVariant(enum.Enum):
    FULL = "full"
    NO_SC_LOSS = "no_sc_loss"
    NO_GLOBAL = "no_global"
    NO_SC_NO_GLOBAL = "no_sc_no_global"
    GLOBAL_ONLY = "global_only"


def apply_variant(config: PipelineConfig, variant: AblationVariant) -> PipelineConfig:
    """Translate an ablation into config terms."""
    if variant is AblationVariant.FULL:
        return replace(config)
    if variant is AblationVariant.NO_SC_LOSS:
        return replace(config, lambda_sc=0.0)
    if variant is AblationVariant.NO_GLOBAL:
        return replace(config, use_global=False)
    if variant is AblationVariant.NO_SC_NO_GLOBAL:
        return replace(config, lambda_sc=0.0, use_global=False)
    if variant is AblationVariant.GLOBAL_ONLY:
        return replace(config, k_channels=0, lambda_sc=0.0)
    raise DomainError(f"unknown variant {variant!r}")


@dataclass
class SemanticArtifacts:
    """Clustering products in canonical class order."""

    centroids: np.ndarray  # (K, d_c)
    class_embeddings: np.ndarray  # (C, d_c)
    calib_targets: np.ndarray  # (C, K)
    h0_channels: np.ndarray  # (K, C, d_c)
    h0_global: np.ndarray  # (C, d_c)
    partition: semantic.PhrasePartition | None
    cluster_result: semantic.SemanticCentroids | None


def build_semantics(ds: LoadedDataset, config: PipelineConfig) -> SemanticArtifacts:
    """Embed phrases, cluster them into K centroids, and pool node states.

    Clustering uses training-class phrases only unless
    `cluster_unseen_phrases` is set; partitioning always covers every
    class so the graph gets states for unseen nodes too.
    """
    k = config.k_channels
    embedded = semantic.embed_class_phrases(ds.phrases_by_class, ds.word_table)
    order = ds.class_ids
    d_c = ds.word_table.dim

    class_emb = np.stack([semantic.class_text_embedding(embedded[cid]) for cid in order])
    if k == 0:
        return SemanticArtifacts(
            centroids=np.zeros((0, d_c)), class_embeddings=class_emb,
            calib_targets=np.zeros((len(order), 0)),
            h0_channels=np.zeros((0, len(order), d_c)), h0_global=class_emb,
            partition=None, cluster_result=None,
        )

    pool_ids = order if config.cluster_unseen_phrases else ds.seen_ids
    points = np.stack([pe.vector for cid in pool_ids for pe in embedded[cid]])
    cluster = semantic.kmeans(
        points, k, seed=config.seed, max_iters=config.kmeans_max_iters,
        tol=config.kmeans_tol, restarts=config.kmeans_restarts,
    )
    partition = semantic.partition_phrases(embedded, cluster)

    calib = np.stack([
        semantic.calibration_targets(class_emb[i], cluster) for i in range(len(order))
    ])
    if config.calibrate_to_similarity:
        calib = 1.0 - calib
    h0_channels = np.stack([
        np.stack([partition.h0[cid][j] for cid in order]) for j in range(k)
    ])
    return SemanticArtifacts(
        centroids=cluster.centroids, class_embeddings=class_emb,
        calib_targets=calib, h0_channels=h0_channels, h0_global=class_emb,
        partition=partition, cluster_result=cluster,
    )


@dataclass
class PipelineModel:
    """All trained state needed to score samples or resume later stages."""

    class_ids: list[int]
    centroids: np.ndarray
    params: AttentionParams
    head: CalibrationHead
    adapter: FeatureAdapter
    bank: ClassifierBank
    calib_targets: np.ndarray
    h0_channels: np.ndarray
    h0_global: np.ndarray
    stack: GcnStack | None
    use_global: bool
    grid_shape: tuple[int, int] | None
    config: PipelineConfig

    @property
    def id_to_pos(self) -> dict[int, int]:
        return {cid: i for i, cid in enumerate(self.class_ids)}


def init_model(ds: LoadedDataset, semantics: SemanticArtifacts,
               config: PipelineConfig) -> PipelineModel:
    rng = np.random.default_rng(config.seed)
    d_c, d_f = ds.word_table.dim, ds.d_f
    bound = np.sqrt(6.0 / (d_c + d_f))
    params = AttentionParams(w_alpha=rng.uniform(-bound, bound, size=(d_c, d_f)))
    head = CalibrationHead(w_sc=rng.normal(0.0, 1.0 / np.sqrt(d_f), size=d_f))
    adapter = FeatureAdapter.identity(d_f, frozen=True)
    seen_positions = range(len(ds.seen_ids))
    bank = ClassifierBank.init(ds.n_classes, d_f, config.k_channels, rng,
                               valid_rows=seen_positions)
    return PipelineModel(
        class_ids=list(ds.class_ids), centroids=semantics.centroids,
        params=params, head=head, adapter=adapter, bank=bank,
        calib_targets=semantics.calib_targets,
        h0_channels=semantics.h0_channels, h0_global=semantics.h0_global,
        stack=None, use_global=config.use_global, grid_shape=ds.grid_shape,
        config=config,
    )


def _train_positions(ds: LoadedDataset) -> tuple[np.ndarray, np.ndarray]:
    idx = ds.sample_indices("train")
    positions = np.array([ds.id_to_pos[int(lab)] for lab in ds.labels[idx]])
    return idx, positions


def run_stage1(config: PipelineConfig, ds: LoadedDataset,
               model: PipelineModel) -> list[float]:
    """Adam over mean cross-entropy plus lambda * calibration on seen samples.

    With `skip_stage1` the loop body never runs but the bank is still
    marked as having completed the stage, mirroring a zero-epoch run.
    Returns the per-epoch mean training loss.
    """
    model.bank.assert_mutable()
    rng = np.random.default_rng(config.seed + 1)
    idx, positions = _train_positions(ds)
    if idx.size == 0:
        raise DomainError("no training samples")
    label_space = np.arange(len(ds.seen_ids), dtype=np.int64)
    epochs = 0 if config.skip_stage1 else config.stage1_epochs

    opt = {
        "w_alpha": AdamState(lr=config.stage1_lr, weight_decay=config.stage1_weight_decay),
        "w_sc": AdamState(lr=config.stage1_lr, weight_decay=config.stage1_weight_decay),
        "w_g": AdamState(lr=config.stage1_lr, weight_decay=config.stage1_weight_decay),
        "b_g": AdamState(lr=config.stage1_lr),
        "w_f": AdamState(lr=config.stage1_lr, weight_decay=config.stage1_weight_decay),
        "b_f": AdamState(lr=config.stage1_lr),
    }
    losses: list[float] = []
    for epoch in range(epochs):
        perm = rng.permutation(idx.size)
        total, seen_count = 0.0, 0
        for start in range(0, idx.size, config.batch_size):
            rows = idx[perm[start:start + config.batch_size]]
            batch = Stage1Batch(
                features=ds.features[rows],
                label_positions=positions[perm[start:start + config.batch_size]],
                label_space=label_space,
                dis_targets=model.calib_targets[positions[perm[start:start + config.batch_size]]],
            )
            loss, _, _, cache = stage1_forward(
                batch, model.centroids, model.params, model.head, model.adapter,
                model.bank, lambda_sc=config.lambda_sc, use_global=config.use_global,
            )
            if not np.isfinite(loss):
                raise NumericError(f"stage-1 loss diverged at epoch {epoch}, batch {start}")
            grads = backward_stage1(cache, model.centroids, model.params,
                                    model.head, model.adapter, model.bank)
            model.params.w_alpha = adam_step(model.params.w_alpha, grads.w_alpha, opt["w_alpha"])
            if config.lambda_sc != 0.0:
                model.head.w_sc = adam_step(model.head.w_sc, grads.w_sc, opt["w_sc"])
            if config.use_global:
                model.bank.w_g = adam_step(model.bank.w_g, grads.w_g, opt["w_g"])
                model.bank.b_g = adam_step(model.bank.b_g, grads.b_g, opt["b_g"])
            if model.bank.k:
                model.bank.w_f = adam_step(model.bank.w_f, grads.w_f, opt["w_f"])
                model.bank.b_f = adam_step(model.bank.b_f, grads.b_f, opt["b_f"])
            total += loss * rows.size
            seen_count += rows.size
        losses.append(total / seen_count)
    model.bank.trained = True
    return losses


def build_graph(ds: LoadedDataset, model: PipelineModel) -> KnowledgeGraph:
    return KnowledgeGraph(
        class_ids=list(ds.class_ids), adjacency=ds.adjacency,
        h0_channels=model.h0_channels, h0_global=model.h0_global,
    )


def run_gcn_stage(config: PipelineConfig, ds: LoadedDataset,
                  model: PipelineModel) -> list[float]:
    """Fit classifier rows over the graph, then swap and freeze the bank."""
    graph = build_graph(ds, model)
    stack = init_stack(
        k=config.k_channels, d_c=ds.word_table.dim, hidden=config.gcn_hidden,
        d_f=ds.d_f, n_layers=config.gcn_layers, seed=config.seed + 2,
        use_global=config.use_global,
    )
    seen_positions = np.arange(len(ds.seen_ids))
    targets = ground_truth_rows(model.bank, seen_positions,
                                include_global=config.use_global)
    curve = train_gcn(
        stack, graph, targets, epochs=config.gcn_epochs, lr=config.gcn_lr,
        weight_decay=config.gcn_weight_decay, dropout=config.gcn_dropout,
        slope=config.leaky_slope, seed=config.seed + 3,
    )
    predicted = predict_all_rows(stack, graph, slope=config.leaky_slope)
    model.bank = replace_classifiers(model.bank, predicted)
    model.stack = stack
    return curve


def run_stage2(config: PipelineConfig, ds: LoadedDataset,
               model: PipelineModel) -> list[float]:
    """Momentum SGD on the adapter (optionally attention) against the
    frozen bank, minimizing cross-entropy only. Returns epoch losses."""
    if not model.bank.frozen:
        raise DomainError("stage 2 expects the replaced, frozen bank")
    rng = np.random.default_rng(config.seed + 4)
    idx, positions = _train_positions(ds)
    label_space = np.arange(len(ds.seen_ids), dtype=np.int64)
    epochs = 0 if config.skip_stage2 else config.stage2_epochs

    model.adapter.frozen = False
    opt_adapter = SgdState(lr=config.stage2_lr, momentum=config.stage2_momentum)
    opt_walpha = SgdState(lr=config.stage2_lr, momentum=config.stage2_momentum)
    losses: list[float] = []
    for epoch in range(epochs):
        perm = rng.permutation(idx.size)
        total, count = 0.0, 0
        for start in range(0, idx.size, config.batch_size):
            rows = idx[perm[start:start + config.batch_size]]
            batch = Stage1Batch(
                features=ds.features[rows],
                label_positions=positions[perm[start:start + config.batch_size]],
                label_space=label_space,
                dis_targets=model.calib_targets[positions[perm[start:start + config.batch_size]]],
            )
            loss, ce, _, cache = stage1_forward(
                batch, model.centroids, model.params, model.head, model.adapter,
                model.bank, lambda_sc=0.0, use_global=config.use_global,
            )
            if not np.isfinite(loss):
                raise NumericError(f"stage-2 loss diverged at epoch {epoch}, batch {start}")
            grads = backward_stage1(cache, model.centroids, model.params,
                                    model.head, model.adapter, model.bank)
            model.adapter.matrix = sgd_momentum_step(model.adapter.matrix,
                                                     grads.adapter, opt_adapter)
            if config.stage2_train_attention:
                model.params.w_alpha = sgd_momentum_step(model.params.w_alpha,
                                                         grads.w_alpha, opt_walpha)
            total += ce * rows.size
            count += rows.size
        losses.append(total / count)
    model.adapter.frozen = True
    return losses


@dataclass
class EvalReport:
    """Hit@k rates plus per-class breakdowns for one evaluation run."""

    mode: str
    seed: int
    k_list: tuple[int, ...]
    hits: dict[int, float]
    per_class_accuracy: dict[int, float]
    confusion_top: list[tuple[int, int, int]]
    n_samples: int
    label_space: list[int]
    config: dict

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "seed": self.seed,
            "k_list": list(self.k_list),
            "hits": {str(k): self.hits[k] for k in self.k_list},
            "per_class_accuracy": {str(c): v for c, v in sorted(self.per_class_accuracy.items())},
            "confusion_top": [list(t) for t in self.confusion_top],
            "n_samples": self.n_samples,
            "label_space": self.label_space,
            "config": self.config,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def evaluate(ds: LoadedDataset, model: PipelineModel, mode: str | None = None,
             k_list=None, split: str = "test", chunk: int = 512) -> EvalReport:
    """Score a sample split against the mode's label space.

    ZSL scores unseen classes only; GZSL scores all classes. The rank of
    the true class breaks score ties toward the lower class id, and
    hit@k counts ranks strictly below k.
    """
    mode = mode or model.config.eval_mode
    k_list = tuple(k_list) if k_list else model.config.topk
    if mode == "zsl":
        label_ids = sorted(ds.unseen_ids)
    elif mode == "gzsl":
        label_ids = sorted(ds.class_ids)
    else:
        raise DomainError(f"unknown eval mode {mode!r}")
    label_positions = np.array([ds.id_to_pos[c] for c in label_ids], dtype=np.int64)

    idx = ds.sample_indices(split)
    if idx.size == 0:
        raise DomainError(f"split {split!r} has no samples")
    col_of_id = {cid: j for j, cid in enumerate(label_ids)}
    for lab in np.unique(ds.labels[idx]):
        if int(lab) not in col_of_id:
            raise DomainError(
                f"sample labeled {int(lab)} is outside the {mode} label space"
            )
    true_cols = np.array([col_of_id[int(lab)] for lab in ds.labels[idx]])

    ranks = np.empty(idx.size, dtype=np.int64)
    top1 = np.empty(idx.size, dtype=np.int64)
    for start in range(0, idx.size, chunk):
        rows = idx[start:start + chunk]
        scores = batch_logits(
            ds.features[rows], model.centroids, model.params, model.adapter,
            model.bank, label_positions, use_global=model.use_global,
        )
        tc = true_cols[start:start + rows.size]
        s_true = scores[np.arange(rows.size), tc]
        cols = np.arange(scores.shape[1])
        better = (scores > s_true[:, None]).sum(axis=1)
        tied_before = ((scores == s_true[:, None]) & (cols[None, :] < tc[:, None])).sum(axis=1)
        ranks[start:start + rows.size] = better + tied_before
        top1[start:start + rows.size] = scores.argmax(axis=1)

    hits = {k: float((ranks < k).mean()) for k in k_list}
    per_class: dict[int, float] = {}
    for cid in sorted(set(int(ds.labels[i]) for i in idx)):
        mask = ds.labels[idx] == cid
        per_class[cid] = float((ranks[mask] == 0).mean())
    pair_counts: dict[tuple[int, int], int] = {}
    for i in range(idx.size):
        t = int(ds.labels[idx[i]])
        p = label_ids[int(top1[i])]
        if t != p:
            pair_counts[(t, p)] = pair_counts.get((t, p), 0) + 1
    confusion = sorted(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:10]

    return EvalReport(
        mode=mode, seed=model.config.seed, k_list=k_list, hits=hits,
        per_class_accuracy=per_class,
        confusion_top=[(t, p, n) for (t, p), n in confusion],
        n_samples=int(idx.size), label_space=list(label_ids),
        config=model.config.to_dict(),
    )


@dataclass
class PipelineResult:
    model: PipelineModel
    stage1_losses: list[float]
    gcn_losses: list[float]
    stage2_losses: list[float]


def run_pipeline(config: PipelineConfig, ds: LoadedDataset) -> PipelineResult:
    """Fine-tune, fit the graph, replace classifiers, fine-tune again."""
    semantics = build_semantics(ds, config)
    model = init_model(ds, semantics, config)
    s1 = run_stage1(config, ds, model)
    gc = run_gcn_stage(config, ds, model)
    s2 = run_stage2(config, ds, model)
    return PipelineResult(model=model, stage1_losses=s1, gcn_losses=gc,
                          stage2_losses=s2)


def run_ablation(variant: AblationVariant, config: PipelineConfig,
                 ds: LoadedDataset) -> EvalReport:
    """Run the full pipeline under one ablation and evaluate it."""
    cfg = apply_variant(config, variant)
    result = run_pipeline(cfg, ds)
    return evaluate(ds, result.model)


SWEEP_CSV_HEADER = "K,L,hit1,hit2,hit5,hit10,hit20"


def sweep_hyperparams(k_range, l_range, config: PipelineConfig,
                      ds: LoadedDataset):
    """Full pipeline per (K, L) cell with the same seed; returns
    (list of (K, L, report), CSV text)."""
    k_range, l_range = list(k_range), list(l_range)
    if not k_range or not l_range:
        raise DomainError("sweep ranges must be nonempty")
    cells = []
    lines = [SWEEP_CSV_HEADER]
    for k in k_range:
        for l in l_range:
            cfg = replace(config, k_channels=k, gcn_layers=l, topk=DEFAULT_TOPK)
            report = evaluate(ds, run_pipeline(cfg, ds).model)
            cells.append((k, l, report))
            lines.append(
                f"{k},{l}," + ",".join(repr(report.hits[i]) for i in DEFAULT_TOPK)
            )
    return cells, "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# model checkpointing


def save_model(model: PipelineModel, path) -> None:
    arrays = {
        "centroids": model.centroids,
        "w_alpha": model.params.w_alpha,
        "w_sc": model.head.w_sc,
        "adapter": model.adapter.matrix,
        "bank.w_g": model.bank.w_g,
        "bank.b_g": model.bank.b_g,
        "bank.w_f": model.bank.w_f,
        "bank.b_f": model.bank.b_f,
        "bank.valid": model.bank.valid,
        "calib_targets": model.calib_targets,
        "h0_channels": model.h0_channels,
        "h0_global": model.h0_global,
        "class_ids": np.asarray(model.class_ids, dtype=np.int64),
    }
    if model.stack is not None:
        for j, ch in enumerate(model.stack.channels):
            for l, w in enumerate(ch.weights):
                arrays[f"gcn.ch{j}.w{l}"] = w
        if model.stack.global_channel is not None:
            for l, w in enumerate(model.stack.global_channel.weights):
                arrays[f"gcn.g.w{l}"] = w
    meta = {
        "kind": "pipeline-model",
        "bank_frozen": model.bank.frozen,
        "bank_trained": model.bank.trained,
        "adapter_frozen": model.adapter.frozen,
        "use_global": model.use_global,
        "grid_shape": list(model.grid_shape) if model.grid_shape else None,
        "has_stack": model.stack is not None,
        "stack_layers": 0 if model.stack is None else (
            model.stack.channels[0].n_layers if model.stack.channels
            else model.stack.global_channel.n_layers),
        "config": model.config.to_dict(),
    }
    save_checkpoint(arrays, meta, path)


def load_model(path) -> PipelineModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "pipeline-model":
        raise DomainError(f"{path}: not a pipeline model checkpoint")
    config = PipelineConfig.from_dict(meta["config"])
    bank = ClassifierBank(
        w_g=arrays["bank.w_g"], b_g=arrays["bank.b_g"],
        w_f=arrays["bank.w_f"], b_f=arrays["bank.b_f"],
        valid=arrays["bank.valid"].astype(bool),
        frozen=bool(meta["bank_frozen"]), trained=bool(meta["bank_trained"]),
    )
    stack = None
    if meta["has_stack"]:
        n_layers = int(meta["stack_layers"])
        channels = []
        j = 0
        while f"gcn.ch{j}.w0" in arrays:
            channels.append(GcnChannel(
                weights=[arrays[f"gcn.ch{j}.w{l}"] for l in range(n_layers)]))
            j += 1
        global_channel = None
        if "gcn.g.w0" in arrays:
            global_channel = GcnChannel(
                weights=[arrays[f"gcn.g.w{l}"] for l in range(n_layers)])
        stack = GcnStack(channels=channels, global_channel=global_channel)
    grid_shape = tuple(meta["grid_shape"]) if meta.get("grid_shape") else None
    return PipelineModel(
        class_ids=[int(c) for c in arrays["class_ids"]],
        centroids=arrays["centroids"],
        params=AttentionParams(w_alpha=arrays["w_alpha"]),
        head=CalibrationHead(w_sc=arrays["w_sc"]),
        adapter=FeatureAdapter(matrix=arrays["adapter"],
                               frozen=bool(meta["adapter_frozen"])),
        bank=bank, calib_targets=arrays["calib_targets"],
        h0_channels=arrays["h0_channels"], h0_global=arrays["h0_global"],
        stack=stack, use_global=bool(meta["use_global"]),
        grid_shape=grid_shape, config=config,
    )
