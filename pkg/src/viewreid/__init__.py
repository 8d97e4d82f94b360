"""Supervised contrastive losses and view-aware distance post-processing for re-identification."""

from .embedding import (
    DistanceMatrix,
    EmbeddingSet,
    LabelMeta,
    SimilarityMatrix,
    euclidean_distances,
    inner_products,
    l2_normalize,
    pairwise_euclidean,
)
from .evaluation import CurveConfig, EvalReport, distance_curve, evaluate
from .losses import (
    ConvergenceStats,
    GlobalFeatureDictionary,
    LossConfig,
    LossOutput,
    LossWeights,
    combined_loss,
    convergence_stats,
    finite_diff_check,
    gsupcon,
    label_smooth_ce,
    lsupcon,
    update_dictionary,
)
from .vabpp import (
    CenterMatrix,
    ScalingMatrix,
    VabppConfig,
    ViewAwarePostProcessor,
    compute_center_matrix,
    compute_delta,
    expand_delta,
    mtd,
    udd,
    vabpp_pipeline,
)
from .io import load_bundled_delta

__version__ = "0.1.0"

__all__ = [
    "CurveConfig",
    "EvalReport",
    "distance_curve",
    "evaluate",
    "DistanceMatrix",
    "EmbeddingSet",
    "LabelMeta",
    "SimilarityMatrix",
    "euclidean_distances",
    "inner_products",
    "l2_normalize",
    "pairwise_euclidean",
    "ConvergenceStats",
    "GlobalFeatureDictionary",
    "LossConfig",
    "LossOutput",
    "LossWeights",
    "combined_loss",
    "convergence_stats",
    "finite_diff_check",
    "gsupcon",
    "label_smooth_ce",
    "lsupcon",
    "update_dictionary",
    "CenterMatrix",
    "ScalingMatrix",
    "VabppConfig",
    "ViewAwarePostProcessor",
    "compute_center_matrix",
    "compute_delta",
    "expand_delta",
    "mtd",
    "udd",
    "vabpp_pipeline",
    "load_bundled_delta",
]
