"""Ordinal embedding from relative similarity comparisons.

Learns an (n, d) Euclidean embedding from assertions of the form "objects
i and j are closer together than objects l and k" by minimizing non-convex
per-comparison losses with variance-reduced stochastic gradient descent and
stabilized Barzilai-Borwein step sizes.
"""
from .core import (
    Comparison,
    ComparisonSet,
    NonFiniteInputError,
    NumericError,
    UsageError,
    load_comparisons,
    load_embedding,
    margin,
    margins,
    save_comparisons,
    save_embedding,
    squared_distance,
    validate_embedding,
)
from .losses import (
    LossModel,
    SparseGradient,
    full_gradient,
    full_objective,
    loss_gradient,
    loss_value,
    slot_gradient,
    triplet_gradient_via_chain_rule,
)
from .metrics import (
    LabeledEmbedding,
    RankingReport,
    average_precisions,
    generalization_error,
    mean_average_precision,
    precision_recall_at_k,
    ranking_report,
    retrieval_ranking,
)
from .optimizer import (
    DegenerateStepError,
    DivergenceError,
    EpochTrace,
    OptimizerConfig,
    UnstableStepError,
    bb_step_size,
    min_inner_length,
    run,
    sbb_step_size,
    write_trace_csv,
)
from .synth import (
    SynthConfig,
    enumerate_triplets,
    generate_points,
    inject_noise,
    split,
    total_triplets,
)

__version__ = "0.1.0"

__all__ = [
    "Comparison",
    "ComparisonSet",
    "DegenerateStepError",
    "DivergenceError",
    "EpochTrace",
    "LabeledEmbedding",
    "LossModel",
    "NonFiniteInputError",
    "NumericError",
    "OptimizerConfig",
    "RankingReport",
    "SparseGradient",
    "SynthConfig",
    "UnstableStepError",
    "UsageError",
    "average_precisions",
    "bb_step_size",
    "enumerate_triplets",
    "full_gradient",
    "full_objective",
    "generalization_error",
    "generate_points",
    "inject_noise",
    "load_comparisons",
    "load_embedding",
    "loss_gradient",
    "loss_value",
    "margin",
    "margins",
    "mean_average_precision",
    "min_inner_length",
    "precision_recall_at_k",
    "ranking_report",
    "retrieval_ranking",
    "run",
    "save_comparisons",
    "save_embedding",
    "sbb_step_size",
    "slot_gradient",
    "split",
    "squared_distance",
    "total_triplets",
    "triplet_gradient_via_chain_rule",
    "validate_embedding",
    "write_trace_csv",
]
