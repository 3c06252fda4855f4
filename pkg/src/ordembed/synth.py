"""Synthetic ground-truth benchmark: Gaussian points and exhaustive triplets.

Points are drawn i.i.d. from N(0, variance * I) in d_true dimensions.  The
triplet universe takes every anchor i and every unordered pair {j, k} of
distinct other objects, oriented so the asserted side is the true one:
(i, j, i, k) with d2(i, j) < d2(i, k) under the generating points.  That
yields n * (n-1) * (n-2) / 2 triplets.  Exact distance ties keep index
order (j < k) and are counted in the result's tie_count diagnostic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ComparisonSet, EmbeddingMatrix, UsageError, validate_embedding


def total_triplets(n: int) -> int:
    """Size of the exhaustive triplet universe over n objects."""
    return n * (n - 1) * (n - 2) // 2


@dataclass(frozen=True)
class SynthConfig:
    """Benchmark generator settings.

    Defaults reproduce the standard instance: 100 points in 10 dimensions
    with coordinate variance 1/20, 10000 training triplets, no noise.
    """

    n: int = 100
    d_true: int = 10
    variance: float = 0.05
    num_train: int = 10_000
    noise_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.n, int) or self.n < 3:
            raise UsageError(f"n must be an integer >= 3, got {self.n!r}")
        if not isinstance(self.d_true, int) or self.d_true < 1:
            raise UsageError(f"d_true must be a positive integer, got {self.d_true!r}")
        if not self.variance > 0:
            raise UsageError(f"variance must be positive, got {self.variance}")
        if not isinstance(self.num_train, int) or self.num_train < 1:
            raise UsageError(f"num_train must be a positive integer, got {self.num_train!r}")
        if self.num_train > total_triplets(self.n):
            raise UsageError(
                f"num_train={self.num_train} exceeds the {total_triplets(self.n)} "
                f"triplets available for n={self.n}"
            )
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise UsageError(f"noise_fraction must be in [0, 1], got {self.noise_fraction}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise UsageError(f"seed must be a non-negative integer, got {self.seed!r}")


def generate_points(cfg: SynthConfig) -> EmbeddingMatrix:
    """Ground-truth points: (n, d_true) draws from N(0, variance * I)."""
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((cfg.n, cfg.d_true)) * np.sqrt(cfg.variance)


def enumerate_triplets(X_true: EmbeddingMatrix) -> ComparisonSet:
    """Every true triplet (i, j, i, k) with d2(i, j) < d2(i, k) under X_true.

    One orientation per (anchor, unordered pair); ties keep j < k and are
    tallied in the returned set's tie_count.
    """
    X = validate_embedding(X_true)
    n = X.shape[0]
    if n < 3:
        raise UsageError(f"triplet enumeration needs n >= 3, got n={n}")
    # Pairwise squared distances via explicit diffs, matching the margin
    # computation path so every emitted triplet has a negative margin.
    diffs = X[:, None, :] - X[None, :, :]
    D = np.einsum("ijd,ijd->ij", diffs, diffs)
    ju, ku = np.triu_indices(n, k=1)
    blocks = []
    ties = 0
    for i in range(n):
        keep = (ju != i) & (ku != i)
        j = ju[keep]
        k = ku[keep]
        dj = D[i, j]
        dk = D[i, k]
        ties += int(np.count_nonzero(dj == dk))
        far_first = dj > dk
        near = np.where(far_first, k, j)
        far = np.where(far_first, j, k)
        anchor = np.full(j.shape[0], i, dtype=np.int64)
        blocks.append(np.column_stack([anchor, near, anchor, far]))
    out = ComparisonSet(np.concatenate(blocks, axis=0), n)
    out.tie_count = ties
    return out


def split(P: ComparisonSet, num_train: int, seed: int) -> tuple[ComparisonSet, ComparisonSet]:
    """Uniform train/test split without replacement; together they cover P.

    Each side keeps P's original comparison order.  num_train == len(P)
    leaves the test side empty.
    """
    N = len(P)
    if not 0 < num_train <= N:
        raise UsageError(f"num_train={num_train} must be in [1, {N}]")
    perm = np.random.default_rng(seed).permutation(N)
    train_rows = np.sort(perm[:num_train])
    test_rows = np.sort(perm[num_train:])
    return P.subset(train_rows), P.subset(test_rows)


def inject_noise(P: ComparisonSet, fraction: float, seed: int) -> ComparisonSet:
    """Swap the (i, j)/(l, k) sides of round(fraction * len(P)) comparisons.

    The flipped rows are a uniform sample without replacement; order is
    preserved, so applying the same (fraction, seed) twice restores P.
    """
    if not 0.0 <= fraction <= 1.0:
        raise UsageError(f"fraction must be in [0, 1], got {fraction}")
    N = len(P)
    if N == 0:
        raise UsageError("comparison set is empty")
    count = int(round(fraction * N))
    out = P.indices.copy()
    if count:
        rows = np.sort(np.random.default_rng(seed).choice(N, size=count, replace=False))
        out[rows] = out[rows][:, [2, 3, 0, 1]]
    return ComparisonSet(out, P.n)
