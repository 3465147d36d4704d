"""Routing-guided merging and low-rank-plus-sparse compression of SMoE experts."""

from .alignment import align_layer, permute_expert, weight_matching
from .compression import (
    PruneSchedule,
    compress_model,
    cubic_ratio,
    decompose_expert,
    decomposed_forward,
    global_prune,
    importance_column_scores,
    stable_rank,
    stable_rank_report,
)
from .errors import FormatError, PipelineError, ShapeError, ValidationError
from .estimator import ExpertMerger
from .grouping import (
    GroupingPlan,
    assign_groups,
    build_plan,
    expert_similarity,
    normalize_frequencies,
    select_dominant,
)
from .merging import merge_group, merge_model, prune_non_dominant
from .model import (
    DecomposedExpert,
    ExpertWeights,
    LowRankSparse,
    ModelManifest,
    SizeReport,
    SmoeLayer,
    account,
    validate_manifest,
)
from .numerics import cosine, matmul, solve_assignment, svd
from .pipeline import run_pipeline
from .runtime import (
    LossBreakdown,
    RoutingStats,
    TokenBatch,
    ToySpec,
    collect_stats,
    ffn_backward,
    gen_toy,
    kd_task_loss,
    layer_forward,
)
from .smaf import read_model, write_model

__version__ = "0.1.0"

__all__ = [
    "account",
    "align_layer",
    "assign_groups",
    "build_plan",
    "collect_stats",
    "compress_model",
    "cosine",
    "cubic_ratio",
    "decompose_expert",
    "decomposed_forward",
    "DecomposedExpert",
    "expert_similarity",
    "ExpertMerger",
    "ExpertWeights",
    "ffn_backward",
    "FormatError",
    "gen_toy",
    "global_prune",
    "GroupingPlan",
    "importance_column_scores",
    "kd_task_loss",
    "layer_forward",
    "LossBreakdown",
    "LowRankSparse",
    "matmul",
    "merge_group",
    "merge_model",
    "ModelManifest",
    "normalize_frequencies",
    "permute_expert",
    "PipelineError",
    "prune_non_dominant",
    "PruneSchedule",
    "read_model",
    "RoutingStats",
    "run_pipeline",
    "select_dominant",
    "ShapeError",
    "SizeReport",
    "SmoeLayer",
    "solve_assignment",
    "stable_rank",
    "stable_rank_report",
    "svd",
    "TokenBatch",
    "ToySpec",
    "validate_manifest",
    "ValidationError",
    "weight_matching",
    "write_model",
]
