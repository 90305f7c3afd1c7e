"""Trustworthy multimodal recommendation under controlled corruption.

Library layout:
  corpus       datasets, splits, feature I/O, synthetic benchmark
  corruptor    modality permutation and edge add/delete noise
  backbone     LightGCN / VBPR-style / modality-kNN scorers, BPR trainer
  rectifier    modality-level rectification (projection + Sinkhorn matching)
  edge_editor  collaborative-prior pruning and completion
  evaluator    full-ranking Recall@K / NDCG@K with filter policies
  harness      config-driven experiments and stress sweeps
"""

from .corpus import (FeatureTable, InteractionSet, SplitDataset, SynthSpec,
                     SynthTruth, ingest_interactions, load_features, load_split,
                     save_features, save_split, split_dataset, synth_generate)
from .corruptor import CorruptionSpec, PermRecord, corrupt_edges, permute_modality
from .backbone import (Adam, EmbeddingModel, TrainConfig, bpr_loss_and_grads,
                       bpr_step, build_item_knn_graph, build_norm_adjacency,
                       init_embeddings, load_model, propagate, save_model, train)
from .rectifier import (AnchorConfig, AnchorTable, ProjectionConfig, Projector,
                        RectifyConfig, SoftMatching, SparseAffinity,
                        build_affinity, compute_anchors, rectify,
                        rectify_pipeline, row_normalize, sinkhorn,
                        train_projection)
from .edge_editor import (EditPlan, apply_edit, collab_similarity,
                          complete_edges, prune_edges)
from .evaluator import MetricsReport, evaluate, ndcg_at_k, rank_items, recall_at_k
from .harness import ConfigError, StageError, report, resolve_config, run_experiment, sweep

__version__ = "0.1.0"
