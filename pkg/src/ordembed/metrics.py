"""Evaluation: held-out comparison error and labeled retrieval quality.

``generalization_error`` measures how often an embedding violates held-out
comparisons (ties count as violations).  The retrieval metrics rank every
other object by ascending squared distance from a query (distance ties break
by ascending index, the query itself is excluded) and score the ranking
against class labels; an object is *relevant* to a query when it shares the
query's label, so a query's relevant pool has ``class size - 1`` members.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ComparisonSet,
    EmbeddingMatrix,
    UsageError,
    margins,
    validate_embedding,
)


def generalization_error(X: EmbeddingMatrix, P: ComparisonSet) -> float:
    """Fraction of comparisons with margin >= 0 (ties are violations)."""
    if len(P) == 0:
        raise UsageError("comparison set is empty")
    return float(np.mean(margins(X, P) >= 0.0))


@dataclass
class LabeledEmbedding:
    """An embedding whose rows carry class labels (one label per object)."""

    X: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.X = validate_embedding(self.X)
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.X.shape[0]:
            raise UsageError(
                f"need one label per object: {self.labels.shape} labels "
                f"for {self.X.shape[0]} objects"
            )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def class_sizes(self) -> np.ndarray:
        """For each object, the size of its class (including itself)."""
        _, inverse, counts = np.unique(self.labels, return_inverse=True, return_counts=True)
        return counts[inverse]


def retrieval_ranking(L: LabeledEmbedding, query: int) -> np.ndarray:
    """Indices of all non-query objects, nearest first.

    Sorted by ascending squared distance to the query; exact distance ties
    break by ascending object index (stable sort over an index-ordered
    candidate list).
    """
    n = L.n
    if not 0 <= query < n:
        raise UsageError(f"query index {query} out of range [0, {n})")
    others = np.concatenate([np.arange(query), np.arange(query + 1, n)])
    diff = L.X[others] - L.X[query]
    d2 = np.einsum("nd,nd->n", diff, diff)
    return others[np.argsort(d2, kind="stable")]


def _relevance_matrix(L: LabeledEmbedding) -> np.ndarray:
    """(n, n-1) boolean: row q marks which ranked items share q's label."""
    n = L.n
    rel = np.zeros((n, n - 1), dtype=bool)
    for q in range(n):
        ranking = retrieval_ranking(L, q)
        rel[q] = L.labels[ranking] == L.labels[q]
    return rel


def precision_recall_at_k(L: LabeledEmbedding, K: int) -> tuple[float, float]:
    """Mean precision and recall of the top-K retrieved items over all queries.

    Precision is true positives / K; recall is true positives / (class size
    - 1).  A query whose class has no other member contributes 0 to recall.
    """
    if not 1 <= K <= L.n - 1:
        raise UsageError(f"K={K} out of range [1, {L.n - 1}]")
    rel = _relevance_matrix(L)
    tp = rel[:, :K].sum(axis=1)
    n_rel = L.class_sizes() - 1
    recall = np.where(n_rel > 0, tp / np.maximum(n_rel, 1), 0.0)
    return float(np.mean(tp / K)), float(np.mean(recall))


def average_precisions(L: LabeledEmbedding, k_max: int) -> np.ndarray:
    """Per-query average precision over ranks 1..k_max.

    AP sums precision-at-rank times the recall increment at that rank; the
    increment is 1/(class size - 1) at each relevant rank, 0 elsewhere.  A
    query with no relevant items has AP 0.
    """
    if not 1 <= k_max <= L.n - 1:
        raise UsageError(f"k_max={k_max} out of range [1, {L.n - 1}]")
    rel = _relevance_matrix(L)[:, :k_max].astype(np.float64)
    ranks = np.arange(1, k_max + 1, dtype=np.float64)
    precision_at = np.cumsum(rel, axis=1) / ranks
    n_rel = (L.class_sizes() - 1).astype(np.float64)
    totals = (precision_at * rel).sum(axis=1)
    return np.where(n_rel > 0, totals / np.maximum(n_rel, 1.0), 0.0)


def mean_average_precision(L: LabeledEmbedding, k_max: int) -> float:
    """Mean of :func:`average_precisions` over all queries."""
    return float(np.mean(average_precisions(L, k_max)))


@dataclass
class RankingReport:
    """Retrieval quality summary: P/R curves over K = 1..k_max plus AP/MAP."""

    k_values: list[int]
    precision_at_k: list[float]
    recall_at_k: list[float]
    average_precisions: list[float]
    map: float
    k_max: int

    def to_dict(self) -> dict:
        return {
            "k_values": [int(k) for k in self.k_values],
            "precision_at_k": [float(p) for p in self.precision_at_k],
            "recall_at_k": [float(r) for r in self.recall_at_k],
            "average_precisions": [float(a) for a in self.average_precisions],
            "map": float(self.map),
            "k_max": int(self.k_max),
        }


RANKING_REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "k_values",
        "precision_at_k",
        "recall_at_k",
        "average_precisions",
        "map",
        "k_max",
    ],
    "additionalProperties": False,
    "properties": {
        "k_values": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "precision_at_k": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "recall_at_k": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "average_precisions": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "k_max": {"type": "integer", "minimum": 1},
    },
}


def ranking_report(L: LabeledEmbedding, k_max: int) -> RankingReport:
    """Precision/recall at every K up to k_max, per-query AP, and MAP.

    Shares one ranking pass across all K, so it matches the standalone
    operations exactly.
    """
    if not 1 <= k_max <= L.n - 1:
        raise UsageError(f"k_max={k_max} out of range [1, {L.n - 1}]")
    rel = _relevance_matrix(L)
    cum = np.cumsum(rel[:, :k_max].astype(np.float64), axis=1)
    ranks = np.arange(1, k_max + 1, dtype=np.float64)
    n_rel = (L.class_sizes() - 1).astype(np.float64)
    safe_rel = np.maximum(n_rel, 1.0)
    precisions = (cum / ranks).mean(axis=0)
    recalls = np.where(n_rel[:, None] > 0, cum / safe_rel[:, None], 0.0).mean(axis=0)
    precision_at = cum / ranks
    totals = (precision_at * rel[:, :k_max]).sum(axis=1)
    aps = np.where(n_rel > 0, totals / safe_rel, 0.0)
    return RankingReport(
        k_values=list(range(1, k_max + 1)),
        precision_at_k=[float(p) for p in precisions],
        recall_at_k=[float(r) for r in recalls],
        average_precisions=[float(a) for a in aps],
        map=float(np.mean(aps)),
        k_max=k_max,
    )


def load_labels(path: str, n: int | None = None) -> np.ndarray:
    """Read a labels CSV of ``index,label`` lines into an index-ordered array.

    Every index in 0..n-1 must appear exactly once (n inferred from the
    file when not given).
    """
    pairs: dict[int, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                idx_str, _, label = line.partition(",")
                if not _:
                    raise UsageError(f"{path}:{lineno}: expected 'index,label', got {line!r}")
                try:
                    idx = int(idx_str)
                except ValueError as exc:
                    raise UsageError(f"{path}:{lineno}: non-integer index {idx_str!r}") from exc
                if idx in pairs:
                    raise UsageError(f"{path}:{lineno}: duplicate index {idx}")
                pairs[idx] = label
    except OSError as exc:
        raise UsageError(f"cannot read labels file {path}: {exc}") from exc
    if not pairs:
        raise UsageError(f"{path}: no labels found")
    if n is None:
        n = max(pairs) + 1
    missing = set(range(n)) - set(pairs)
    if missing or set(pairs) - set(range(n)):
        raise UsageError(f"{path}: labels must cover indices 0..{n - 1} exactly once")
    return np.asarray([pairs[i] for i in range(n)])
