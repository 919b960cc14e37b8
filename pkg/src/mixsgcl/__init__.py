"""Graph collaborative filtering with supervised graph contrastive learning and mixup augmentation."""

from .augmentation import MixupConfig, augment_batch, edge_mixup, node_mixup, sample_simplex_weights
from .dataset import (
    InteractionDataset,
    RawInteractions,
    SplitConfig,
    apply_k_core,
    build_dataset,
    load_cache,
    load_interactions,
    save_cache,
)
from .evaluator import MetricsReport, embedding_shift, evaluate, ndcg_at_k, rank_items, recall_at_k
from .objectives import LossConfig, LossKind, bpr_loss, infonce_gcl_loss, sgcl_loss, sslrec_loss
from .propagation import (
    EmbeddingState,
    NormalizedAdjacency,
    backward,
    build_normalized_adjacency,
    combine_layers,
    init_embeddings,
    propagate,
)
from .trainer import TrainConfig, TrainHistory, adam_step, fit

__version__ = "0.1.0"
