"""Embeddings, relative comparisons, and the distance/margin primitives.

An embedding is a plain ``(n, d)`` float64 array; row ``i`` holds the
coordinates of object ``i``.  A comparison ``(i, j, l, k)`` asserts that
objects ``i`` and ``j`` sit closer together than objects ``l`` and ``k``:

    ||x_i - x_j||^2  <  ||x_l - x_k||^2

A triplet ``(i, j, k)`` ("j is closer to i than k is") is the special case
``l == i`` and is stored as the quadruplet ``(i, j, i, k)``.

The *margin* of a comparison is ``d2(i,j) - d2(l,k)``; the comparison is
satisfied exactly when its margin is strictly negative.

File formats
------------
Comparison files are UTF-8 text with one comparison per line, either
``i,j,k`` (triplet) or ``i,j,l,k`` (quadruplet), 0-based integer indices.
Lines starting with ``#`` and blank lines are ignored.  Embedding files are
CSV with one row per object and ``d`` comma-separated reals.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np


class UsageError(ValueError):
    """Caller misuse: bad arguments, malformed files, empty inputs."""


class NumericError(ArithmeticError):
    """Numerical failure: non-finite inputs, unstable steps, divergence."""


class NonFiniteInputError(NumericError):
    """An input array contains NaN or infinity."""


# EmbeddingMatrix is a plain array; this alias documents intent in signatures.
EmbeddingMatrix = np.ndarray


def validate_embedding(X: np.ndarray, *, require_finite: bool = True) -> EmbeddingMatrix:
    """Coerce ``X`` to a float64 ``(n, d)`` matrix and check its invariants.

    Requires n >= 2 and d >= 1.  With ``require_finite`` (the default) every
    entry must be finite, otherwise :class:`NonFiniteInputError` is raised.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise UsageError(f"embedding must be 2-D, got shape {X.shape}")
    n, d = X.shape
    if n < 2 or d < 1:
        raise UsageError(f"embedding needs at least 2 rows and 1 column, got {n}x{d}")
    if require_finite and not np.isfinite(X).all():
        raise NonFiniteInputError("embedding contains non-finite entries")
    return X


class Comparison(NamedTuple):
    """One relative comparison: pair (i, j) is closer than pair (l, k)."""

    i: int
    j: int
    l: int
    k: int

    @property
    def is_triplet(self) -> bool:
        return self.l == self.i

    def swapped(self) -> "Comparison":
        """The opposite assertion: (l, k) closer than (i, j)."""
        return Comparison(self.l, self.k, self.i, self.j)


def _as_index_array(comparisons: Iterable) -> np.ndarray:
    arr = np.asarray(list(comparisons) if not isinstance(comparisons, np.ndarray) else comparisons)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] not in (3, 4):
        raise UsageError(f"comparisons must be rows of 3 or 4 indices, got shape {arr.shape}")
    if arr.shape[1] == 3:
        arr = np.column_stack([arr[:, 0], arr[:, 1], arr[:, 0], arr[:, 2]])
    if not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise UsageError("comparison indices must be integers")
        arr = as_int
    return np.ascontiguousarray(arr, dtype=np.int64)


@dataclass
class ComparisonSet:
    """An ordered collection of comparisons over ``n`` objects.

    Backed by an ``(N, 4)`` int64 array so batch operations stay vectorized;
    element access yields :class:`Comparison` tuples.  ``tie_count`` is a
    diagnostic set by the synthetic enumerator (pairs whose ground-truth
    distances tied and were ordered by index).
    """

    indices: np.ndarray
    n: int
    tie_count: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        self.indices = _as_index_array(self.indices)
        if self.n < 2:
            raise UsageError(f"a comparison set needs n >= 2 objects, got n={self.n}")
        idx = self.indices
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.n:
                bad = int(np.argmax((idx < 0).any(axis=1) | (idx >= self.n).any(axis=1)))
                raise UsageError(
                    f"comparison {bad} has indices outside [0, {self.n}): {tuple(idx[bad])}"
                )
            degenerate = (idx[:, 0] == idx[:, 1]) | (idx[:, 2] == idx[:, 3])
            if degenerate.any():
                bad = int(np.argmax(degenerate))
                raise UsageError(
                    f"comparison {bad} is degenerate (i == j or l == k): {tuple(idx[bad])}"
                )

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __getitem__(self, idx: int) -> Comparison:
        i, j, l, k = self.indices[idx]
        return Comparison(int(i), int(j), int(l), int(k))

    def __iter__(self) -> Iterator[Comparison]:
        for row in self.indices:
            yield Comparison(int(row[0]), int(row[1]), int(row[2]), int(row[3]))

    def subset(self, rows: np.ndarray) -> "ComparisonSet":
        """A new set holding the given rows, in the given order."""
        return ComparisonSet(self.indices[rows], self.n)

    @classmethod
    def from_comparisons(cls, comparisons: Sequence, n: int) -> "ComparisonSet":
        return cls(_as_index_array(comparisons), n)


def _check_index(n: int, a: int, name: str) -> int:
    a = int(a)
    if not 0 <= a < n:
        raise UsageError(f"index {name}={a} out of range [0, {n})")
    return a


def squared_distance(X: EmbeddingMatrix, a: int, b: int) -> float:
    """Squared Euclidean distance between rows ``a`` and ``b`` of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    a = _check_index(X.shape[0], a, "a")
    b = _check_index(X.shape[0], b, "b")
    diff = X[a] - X[b]
    return float(diff @ diff)


def margin(X: EmbeddingMatrix, p) -> float:
    """Margin ``d2(i,j) - d2(l,k)`` of comparison ``p``; negative iff satisfied."""
    i, j, l, k = (int(v) for v in p)
    return squared_distance(X, i, j) - squared_distance(X, l, k)


def margins(X: EmbeddingMatrix, cset: ComparisonSet) -> np.ndarray:
    """Vector of margins for every comparison in ``cset``."""
    X = np.asarray(X, dtype=np.float64)
    if len(cset) and cset.indices.max() >= X.shape[0]:
        raise UsageError(
            f"comparison set references object {int(cset.indices.max())} "
            f"but the embedding has only {X.shape[0]} rows"
        )
    idx = cset.indices
    dij = X[idx[:, 0]] - X[idx[:, 1]]
    dlk = X[idx[:, 2]] - X[idx[:, 3]]
    return np.einsum("nd,nd->n", dij, dij) - np.einsum("nd,nd->n", dlk, dlk)


# ---------------------------------------------------------------------------
# File I/O


def _atomic_write_text(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file + rename in the same dir."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_comparisons(path: str, n: int | None = None) -> ComparisonSet:
    """Read a comparison file; infers ``n`` as max index + 1 unless given."""
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) not in (3, 4):
                    raise UsageError(
                        f"{path}:{lineno}: expected 3 or 4 comma-separated indices, got {line!r}"
                    )
                try:
                    vals = [int(p) for p in parts]
                except ValueError as exc:
                    raise UsageError(f"{path}:{lineno}: non-integer index in {line!r}") from exc
                if len(vals) == 3:
                    vals = [vals[0], vals[1], vals[0], vals[2]]
                rows.append(vals)
    except OSError as exc:
        raise UsageError(f"cannot read comparison file {path}: {exc}") from exc
    if not rows:
        raise UsageError(f"{path}: no comparisons found")
    arr = np.asarray(rows, dtype=np.int64)
    inferred = int(arr.max()) + 1
    if n is None:
        n = max(inferred, 2)
    try:
        return ComparisonSet(arr, n)
    except UsageError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def save_comparisons(path: str, cset: ComparisonSet) -> None:
    """Write a comparison file; triplets are written in 3-column form."""
    lines = []
    for row in cset.indices:
        i, j, l, k = (int(v) for v in row)
        if l == i:
            lines.append(f"{i},{j},{k}")
        else:
            lines.append(f"{i},{j},{l},{k}")
    _atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_embedding(path: str) -> EmbeddingMatrix:
    """Read an embedding CSV (one row per object)."""
    try:
        X = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise UsageError(f"cannot read embedding file {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"{path}: malformed embedding CSV: {exc}") from exc
    return validate_embedding(X)


def save_embedding(path: str, X: EmbeddingMatrix) -> None:
    """Write an embedding CSV with full float64 round-trip precision."""
    X = validate_embedding(X, require_finite=False)
    lines = [",".join(repr(float(v)) for v in row) for row in X]
    _atomic_write_text(path, "\n".join(lines) + "\n")
