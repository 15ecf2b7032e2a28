"""Fine-grained zero-shot learning over a class knowledge graph.

The library turns per-class text into key semantic centroids, attends
over image region features with one channel per centroid, and regresses
classifier weights for unseen classes through independent GCN channels
on the class graph.
"""

__version__ = "0.1.0"

from .attention import (
    AttentionParams,
    CalibrationHead,
    ClassifierBank,
    FeatureAdapter,
    FineGrainedFeatures,
    RegionFeatureGrid,
    attention_weights,
    compose_logits,
    cross_entropy,
    export_attention_heatmap,
    extract_features,
    fine_grained_feature,
    self_calibration_loss,
)
from .data import (
    DatasetManifest,
    LoadedDataset,
    SyntheticWorldSpec,
    generate_synthetic_world,
    load_checkpoint,
    load_dataset,
    load_manifest,
    oracle_scores,
    read_region_features,
    save_checkpoint,
    write_region_features,
)
from .errors import (
    DomainError,
    FormatError,
    FreezeError,
    NumericError,
    OovError,
    ShapeError,
    StateError,
    VersionError,
)
from .gcn import (
    GcnChannel,
    GcnStack,
    KnowledgeGraph,
    gcn_forward,
    gcn_loss,
    ground_truth_rows,
    init_stack,
    replace_classifiers,
    row_normalize,
    train_gcn,
)
from .pipeline import (
    AblationVariant,
    EvalReport,
    PipelineConfig,
    PipelineModel,
    build_semantics,
    evaluate,
    load_model,
    run_ablation,
    run_pipeline,
    save_model,
    sweep_hyperparams,
)
from .semantic import (
    PhraseEmbedding,
    PhrasePartition,
    SemanticCentroids,
    WordVectorTable,
    calibration_targets,
    class_text_embedding,
    embed_phrase,
    extract_phrases,
    kmeans,
    load_word_vectors,
    partition_phrases,
)
from .tensor import (
    AdamState,
    SgdState,
    adam_step,
    cosine_distance,
    dropout_mask,
    finite_diff_grad,
    l2_normalize_rows,
    leaky_relu,
    matmul,
    sgd_momentum_step,
    softmax,
)
