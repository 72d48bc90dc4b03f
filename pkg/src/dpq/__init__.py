"""Learned product-quantized embedding layers.

Each vocabulary item is represented by a short discrete code (one symbol
per column group) plus a small shared value matrix; decoding is pure
indexing and concatenation. Two training approximations make the codes
learnable end-to-end: a two-temperature softmax relaxation ("sx") and a
straight-through centroid estimator ("vq").
"""

from .analysis import (
    CheckpointDelta,
    NeighborReport,
    code_change_rate,
    code_distribution,
    export_code_table,
    nearest_neighbors,
)
from .autograd import (
    ForwardTrace,
    GradientBundle,
    ema_update,
    soft_emission,
    sx_backward,
    sx_forward,
    vq_backward,
    vq_forward,
)
from .core import (
    Codebook,
    CompressionStats,
    DpqConfig,
    QuantizerState,
    RankCertificate,
    ValueView,
    build_codebook,
    build_table,
    compression_stats,
    discretize,
    init_state,
    one_hot_codebook,
    rank_certificate,
    reverse_discretize,
)
from .errors import (
    CorruptCodebookError,
    CorruptFileError,
    DpqError,
    OracleFailureError,
    TrainingDivergedError,
    UnsupportedFileError,
)
from .numerics import Rng, central_diff_grad, matrix_rank, softmax_rows
from .storage import (
    Artifact,
    artifact_from_state,
    load_artifact,
    pack_codes,
    save_artifact,
    unpack_codes,
)
from .trainer import (
    ClassifierModel,
    FullEmbedding,
    QuantizedEmbedding,
    SgdOptions,
    TextDataset,
    TrainReport,
    grad_check,
    kmeans_oracle,
    load_text_dataset,
    synthetic_corpus,
    train_classifier,
    train_reconstruction,
)

__version__ = "0.1.0"
