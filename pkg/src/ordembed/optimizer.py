"""Variance-reduced stochastic descent with stabilized Barzilai-Borwein steps.

The main method ("svrg-sbb") runs epochs of stochastic variance-reduced
gradient descent.  Each epoch s snapshots the current iterate Xt, computes
the full training gradient g there, and then takes m inner steps

    X <- X - eta_s * (grad_p(X) - grad_p(Xt) + g)

on uniformly sampled comparisons p.  From epoch 1 on, the step size comes
from consecutive snapshots via the stabilized Barzilai-Borwein rule

    eta_s = ||dX||^2 / (m * (|<dX, dg>| + epsilon * ||dX||^2))

which is sandwiched between 1/(m*(L + epsilon)) and 1/(m*epsilon) for an
L-smooth objective, so a single run cannot blow up even when the curvature
along dX vanishes.  Epoch 0 uses the configured eta0.

Baselines share the trace format and align their rows on the same gradient
-evaluation budget of N + 2m per epoch: "svrg-fixed" keeps eta0 throughout,
"sgd" takes plain stochastic steps with an eta0 / (1 + s) per-epoch decay,
and "batch" takes full-gradient steps of constant eta0.

Gradient evaluations are billed as in the accounting above: N + 2m per SVRG
epoch, 1 per SGD step, N per batch step.  Trace-time measurements (error
rates, gradient norms) are free.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from .core import (
    ComparisonSet,
    EmbeddingMatrix,
    NumericError,
    UsageError,
    _atomic_write_text,
    validate_embedding,
)
from .losses import LossModel, _pair_coefficients, full_gradient
from .metrics import generalization_error

METHODS = ("svrg-sbb", "svrg-fixed", "sgd", "batch")
OUTPUT_RULES = ("last-iterate", "uniform-random-iterate")


class DegenerateStepError(NumericError):
    """Consecutive outer iterates are identical; no step size is defined."""


class UnstableStepError(NumericError):
    """Zero curvature denominator with epsilon == 0; the step is unbounded."""


class DivergenceError(NumericError):
    """The iterate left the finite floats; carries the offending epoch."""

    def __init__(self, epoch: int, message: str) -> None:
        super().__init__(message)
        self.epoch = epoch


@dataclass
class OptimizerConfig:
    """Run settings; ``m`` defaults to the training-set size when left None.

    Setting ``epsilon=0`` with method "svrg-sbb" removes the stabilizer and
    is only accepted together with ``assume_nonzero_curvature=True``, i.e.
    an explicit promise that curvature along the outer differences stays
    bounded away from zero.
    """

    method: str = "svrg-sbb"
    m: int | None = None
    epochs: int = 20
    epsilon: float = 0.005
    eta0: float = 0.1
    seed: int = 0
    output_rule: str = "last-iterate"
    assume_nonzero_curvature: bool = False

    def validate(self) -> None:
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.output_rule not in OUTPUT_RULES:
            raise UsageError(
                f"unknown output rule {self.output_rule!r}; expected one of {OUTPUT_RULES}"
            )
        if self.m is not None and (not isinstance(self.m, int) or self.m < 1):
            raise UsageError(f"m must be a positive integer or None, got {self.m!r}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise UsageError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise UsageError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (math.isfinite(self.eta0) and self.eta0 > 0):
            raise UsageError(f"eta0 must be finite and positive, got {self.eta0}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise UsageError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.method == "svrg-sbb" and self.epsilon == 0 and not self.assume_nonzero_curvature:
            raise UsageError(
                "svrg-sbb with epsilon=0 is unstabilized; set epsilon > 0, or set "
                "assume_nonzero_curvature=True if curvature is known to stay positive"
            )

    def resolved(self, n_train: int) -> "OptimizerConfig":
        """A validated copy with ``m`` filled in from the training-set size."""
        self.validate()
        return replace(self, m=self.m if self.m is not None else int(n_train))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "m": self.m,
            "epochs": self.epochs,
            "epsilon": self.epsilon,
            "eta0": self.eta0,
            "seed": self.seed,
            "output_rule": self.output_rule,
            "assume_nonzero_curvature": self.assume_nonzero_curvature,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        data = dict(data)
        if "S" in data:
            data.setdefault("epochs", data["S"])
            del data["S"]
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown optimizer config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class EpochTrace:
    """One per-epoch record of an optimizer run.

    ``eta_bb_abs`` is the magnitude of the unstabilized Barzilai-Borwein
    step on the same trajectory (a diagnostic; NaN on epoch 0 or when the
    outer difference degenerates).  ``step_reused`` flags epochs where the
    outer difference was exactly zero and the previous step size was kept.
    Both diagnostics live on the object only; the CSV keeps the fixed
    column set in TRACE_COLUMNS.
    """

    epoch: int
    eta: float
    grad_norm: float
    train_error: float
    test_error: float
    grad_evals: int
    elapsed_ms: float
    eta_bb_abs: float = math.nan
    step_reused: bool = False


TRACE_COLUMNS = (
    "epoch",
    "eta",
    "grad_norm",
    "train_error",
    "test_error",
    "grad_evals",
    "elapsed_ms",
)


def write_trace_csv(path: str, traces: list[EpochTrace]) -> None:
    """Write traces as CSV with the TRACE_COLUMNS header, atomically."""
    lines = [",".join(TRACE_COLUMNS)]
    for t in traces:
        lines.append(
            f"{t.epoch},{t.eta!r},{t.grad_norm!r},{t.train_error!r},"
            f"{t.test_error!r},{t.grad_evals},{t.elapsed_ms!r}"
        )
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Step-size rules


def _outer_diffs(
    X_cur: np.ndarray, X_prev: np.ndarray, g_cur: np.ndarray, g_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    arrays = [np.asarray(a, dtype=np.float64) for a in (X_cur, X_prev, g_cur, g_prev)]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise UsageError(f"iterates and gradients must share one shape, got {sorted(shapes)}")
    X_cur, X_prev, g_cur, g_prev = arrays
    return (X_cur - X_prev).ravel(), (g_cur - g_prev).ravel()


def bb_step_size(
    X_cur: np.ndarray,
    X_prev: np.ndarray,
    g_cur: np.ndarray,
    g_prev: np.ndarray,
    m: int,
) -> float:
    """Signed Barzilai-Borwein step ||dX||^2 / (m * <dX, dg>).

    Returned as-is (it can be negative or huge); use the stabilized rule for
    actual steps.
    """
    if m < 1:
        raise UsageError(f"m must be >= 1, got {m}")
    dx, dg = _outer_diffs(X_cur, X_prev, g_cur, g_prev)
    nrm2 = float(dx @ dx)
    if nrm2 == 0.0:
        raise DegenerateStepError("consecutive iterates are identical; step undefined")
    ip = float(dx @ dg)
    if ip == 0.0:
        raise UnstableStepError("zero curvature inner product; raw step is unbounded")
    return nrm2 / (m * ip)


def sbb_step_size(
    X_cur: np.ndarray,
    X_prev: np.ndarray,
    g_cur: np.ndarray,
    g_prev: np.ndarray,
    m: int,
    epsilon: float,
) -> float:
    """Stabilized Barzilai-Borwein step.

        ||dX||^2 / (m * (|<dX, dg>| + epsilon * ||dX||^2))

    Always positive, and at most 1/(m * epsilon) when epsilon > 0.
    """
    if m < 1:
        raise UsageError(f"m must be >= 1, got {m}")
    if not (math.isfinite(epsilon) and epsilon >= 0):
        raise UsageError(f"epsilon must be finite and >= 0, got {epsilon}")
    dx, dg = _outer_diffs(X_cur, X_prev, g_cur, g_prev)
    nrm2 = float(dx @ dx)
    if nrm2 == 0.0:
        raise DegenerateStepError("consecutive iterates are identical; step undefined")
    ip = float(dx @ dg)
    denom = m * (abs(ip) + epsilon * nrm2)
    if denom == 0.0:
        raise UnstableStepError(
            "zero curvature inner product with epsilon=0; set epsilon > 0 to bound the step"
        )
    return nrm2 / denom


def min_inner_length(L: float, epsilon: float) -> int:
    """Smallest inner-loop length with a convergence guarantee.

    For an L-smooth objective and stabilizer epsilon, returns the least
    integer strictly greater than

        max(L^2/epsilon * (1 + 2L/epsilon), 1 + sqrt(1 + 8L^3/epsilon)) / epsilon

    Advisory only; runs never enforce it.
    """
    if not (isinstance(L, (int, float)) and math.isfinite(L) and L > 0):
        raise UsageError(f"L must be a positive finite number, got {L!r}")
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise UsageError(
            f"epsilon must be a positive finite number, got {epsilon!r}; "
            "the bound needs an explicit curvature floor"
        )
    # Exact rational arithmetic: float rounding near integer boundaries
    # would otherwise shift the returned count by one.
    L_q = Fraction(L)
    eps_q = Fraction(epsilon)
    first = (L_q * L_q / eps_q) * (1 + 2 * L_q / eps_q)
    n_first = math.floor(first / eps_q) + 1

    # Second branch: floor((1 + sqrt(r)) / epsilon) + 1 with r = 1 + 8L^3/eps.
    # sqrt(r) is irrational, so bracket the floor with an integer square root
    # and settle it by comparing squares.
    r = 1 + 8 * L_q**3 / eps_q
    p, q = r.numerator, r.denominator
    a, b = eps_q.numerator, eps_q.denominator

    def is_below(k: int) -> bool:
        # k <= (1 + sqrt(p/q)) / (a/b)  <=>  (k*a - b)^2 * q <= p * b^2
        u = k * a - b
        return u <= 0 or u * u * q <= p * b * b

    s_int = math.isqrt(p * q)
    lo = (b * (q + s_int)) // (a * q)
    hi = (b * (q + s_int + 1)) // (a * q)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if is_below(mid):
            lo = mid
        else:
            hi = mid - 1
    n_second = lo + 1
    return max(n_first, n_second)


# ---------------------------------------------------------------------------
# The run loop

EpochCallback = Callable[[int, np.ndarray, np.ndarray, float], None]
StepCallback = Callable[[int, int, int, np.ndarray, np.ndarray], None]


def _check_sets(X0: np.ndarray, train: ComparisonSet, test: ComparisonSet | None) -> None:
    n = X0.shape[0]
    if len(train) == 0:
        raise UsageError("training comparison set is empty")
    if int(train.indices.max()) >= n:
        raise UsageError(
            f"training set references object {int(train.indices.max())} "
            f"but the embedding has {n} rows"
        )
    if test is not None and len(test) and int(test.indices.max()) >= n:
        raise UsageError(
            f"test set references object {int(test.indices.max())} "
            f"but the embedding has {n} rows"
        )


def run(
    model: LossModel,
    train: ComparisonSet,
    test: ComparisonSet | None,
    X0: EmbeddingMatrix,
    cfg: OptimizerConfig,
    *,
    epoch_callback: EpochCallback | None = None,
    step_callback: StepCallback | None = None,
) -> tuple[EmbeddingMatrix, list[EpochTrace]]:
    """Optimize an embedding on ``train``; returns (embedding, traces).

    Deterministic: identical (model, data, X0, cfg) give bit-identical
    embeddings and traces (elapsed_ms aside).  ``test`` may be None, in
    which case test_error is recorded as NaN.  Raises DivergenceError (with
    the offending epoch) if the iterate leaves the finite floats; the input
    X0 is never mutated.

    ``epoch_callback(s, snapshot, full_grad, eta)`` fires on SVRG methods
    after each epoch's step size is fixed; ``step_callback(s, t, pick,
    X_before, direction)`` fires before every stochastic update (SVRG and
    SGD).  Callbacks receive copies and add no cost when unset.
    """
    X0 = validate_embedding(X0)
    _check_sets(X0, train, test)
    cfg = cfg.resolved(len(train))
    model = model.resolved(X0.shape[1])
    model.params()
    if cfg.epochs == 0:
        return X0.copy(), []
    if cfg.method in ("svrg-sbb", "svrg-fixed"):
        return _run_svrg(model, train, test, X0, cfg, epoch_callback, step_callback)
    if cfg.method == "sgd":
        return _run_sgd(model, train, test, X0, cfg, step_callback)
    return _run_batch(model, train, test, X0, cfg)


def _test_error(X: np.ndarray, test: ComparisonSet | None) -> float:
    if test is None or len(test) == 0:
        return math.nan
    return generalization_error(X, test)


def _run_svrg(
    model: LossModel,
    train: ComparisonSet,
    test: ComparisonSet | None,
    X0: np.ndarray,
    cfg: OptimizerConfig,
    epoch_callback: EpochCallback | None,
    step_callback: StepCallback | None,
) -> tuple[np.ndarray, list[EpochTrace]]:
    kind, delta, alpha = model.params()
    idx = train.indices
    N = len(train)
    m = cfg.m
    use_sbb = cfg.method == "svrg-sbb"
    pick_ss, res_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    pick_rng = np.random.default_rng(pick_ss)
    uniform = cfg.output_rule == "uniform-random-iterate"
    res_rng = np.random.default_rng(res_ss) if uniform else None

    X = X0.copy()
    reservoir = X0.copy()
    seen = 0
    Xt_prev: np.ndarray | None = None
    g_prev: np.ndarray | None = None
    eta = cfg.eta0
    if use_sbb and cfg.epsilon > 0:
        # The stabilized-step bound 1/(m * epsilon) holds for every epoch,
        # so the warm-up step is clamped to it as well.
        eta = min(eta, 1.0 / (m * cfg.epsilon))
    traces: list[EpochTrace] = []
    grad_evals = 0
    start = time.perf_counter()

    for s in range(cfg.epochs):
        Xtilde = X.copy()
        g = full_gradient(model, Xtilde, train)
        grad_evals += N
        reused = False
        bb_abs = math.nan
        if s > 0:
            dx = (Xtilde - Xt_prev).ravel()
            nrm2 = float(dx @ dx)
            if nrm2 == 0.0:
                reused = True
            else:
                ip = float(dx @ (g - g_prev).ravel())
                bb_abs = abs(nrm2 / (m * ip)) if ip != 0.0 else math.inf
                if use_sbb:
                    eta = sbb_step_size(Xtilde, Xt_prev, g, g_prev, m, cfg.epsilon)
        if epoch_callback is not None:
            epoch_callback(s, Xtilde.copy(), g.copy(), eta)

        eta_g = eta * g
        picks = pick_rng.integers(0, N, size=m)
        res_u = res_rng.random(size=m) if uniform else None
        for t in range(m):
            i, j, l, k = idx[picks[t]]
            dij = X[i] - X[j]
            dlk = X[l] - X[k]
            a_c, b_c = _pair_coefficients(
                kind, delta, alpha, float(dij @ dij), float(dlk @ dlk)
            )
            eij = Xtilde[i] - Xtilde[j]
            elk = Xtilde[l] - Xtilde[k]
            a_s, b_s = _pair_coefficients(
                kind, delta, alpha, float(eij @ eij), float(elk @ elk)
            )
            ui = 2.0 * (a_c * dij - a_s * eij)
            ul = 2.0 * (b_c * dlk - b_s * elk)
            if step_callback is not None:
                direction = g.copy()
                direction[i] += ui
                direction[j] -= ui
                direction[l] += ul
                direction[k] -= ul
                step_callback(s, t, int(picks[t]), X.copy(), direction)
            X -= eta_g
            X[i] -= eta * ui
            X[j] += eta * ui
            X[l] -= eta * ul
            X[k] += eta * ul
            if uniform:
                seen += 1
                if res_u[t] < 1.0 / seen:
                    reservoir = X.copy()
        grad_evals += 2 * m
        if not np.isfinite(X).all():
            raise DivergenceError(s, f"non-finite iterate after epoch {s}")
        Xt_prev = Xtilde
        g_prev = g
        traces.append(
            EpochTrace(
                epoch=s,
                eta=float(eta),
                grad_norm=float(np.linalg.norm(g)),
                train_error=generalization_error(X, train),
                test_error=_test_error(X, test),
                grad_evals=grad_evals,
                elapsed_ms=(time.perf_counter() - start) * 1000.0,
                eta_bb_abs=bb_abs,
                step_reused=reused,
            )
        )
    out = reservoir if uniform else X
    return out.copy(), traces


def _run_sgd(
    model: LossModel,
    train: ComparisonSet,
    test: ComparisonSet | None,
    X0: np.ndarray,
    cfg: OptimizerConfig,
    step_callback: StepCallback | None,
) -> tuple[np.ndarray, list[EpochTrace]]:
    kind, delta, alpha = model.params()
    idx = train.indices
    N = len(train)
    block = N + 2 * cfg.m
    pick_ss, res_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    pick_rng = np.random.default_rng(pick_ss)
    uniform = cfg.output_rule == "uniform-random-iterate"
    res_rng = np.random.default_rng(res_ss) if uniform else None

    X = X0.copy()
    reservoir = X0.copy()
    seen = 0
    traces: list[EpochTrace] = []
    grad_evals = 0
    start = time.perf_counter()

    for s in range(cfg.epochs):
        eta = cfg.eta0 / (1.0 + s)
        picks = pick_rng.integers(0, N, size=block)
        res_u = res_rng.random(size=block) if uniform else None
        for t in range(block):
            i, j, l, k = idx[picks[t]]
            dij = X[i] - X[j]
            dlk = X[l] - X[k]
            a, b = _pair_coefficients(kind, delta, alpha, float(dij @ dij), float(dlk @ dlk))
            ui = (2.0 * a) * dij
            ul = (2.0 * b) * dlk
            if step_callback is not None:
                direction = np.zeros_like(X)
                direction[i] += ui
                direction[j] -= ui
                direction[l] += ul
                direction[k] -= ul
                step_callback(s, t, int(picks[t]), X.copy(), direction)
            X[i] -= eta * ui
            X[j] += eta * ui
            X[l] -= eta * ul
            X[k] += eta * ul
            if uniform:
                seen += 1
                if res_u[t] < 1.0 / seen:
                    reservoir = X.copy()
        grad_evals += block
        if not np.isfinite(X).all():
            raise DivergenceError(s, f"non-finite iterate after epoch {s}")
        traces.append(
            EpochTrace(
                epoch=s,
                eta=float(eta),
                grad_norm=float(np.linalg.norm(full_gradient(model, X, train))),
                train_error=generalization_error(X, train),
                test_error=_test_error(X, test),
                grad_evals=grad_evals,
                elapsed_ms=(time.perf_counter() - start) * 1000.0,
            )
        )
    out = reservoir if uniform else X
    return out.copy(), traces


def _run_batch(
    model: LossModel,
    train: ComparisonSet,
    test: ComparisonSet | None,
    X0: np.ndarray,
    cfg: OptimizerConfig,
) -> tuple[np.ndarray, list[EpochTrace]]:
    N = len(train)
    block = N + 2 * cfg.m
    uniform = cfg.output_rule == "uniform-random-iterate"
    res_rng = (
        np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1]) if uniform else None
    )

    X = X0.copy()
    reservoir = X0.copy()
    seen = 0
    steps = 0
    traces: list[EpochTrace] = []
    start = time.perf_counter()

    for s in range(cfg.epochs):
        target = (s + 1) * block
        while (steps + 1) * N <= target:
            g = full_gradient(model, X, train)
            X -= cfg.eta0 * g
            steps += 1
            if not np.isfinite(X).all():
                raise DivergenceError(s, f"non-finite iterate after epoch {s}")
            if uniform:
                seen += 1
                if res_rng.random() < 1.0 / seen:
                    reservoir = X.copy()
        traces.append(
            EpochTrace(
                epoch=s,
                eta=float(cfg.eta0),
                grad_norm=float(np.linalg.norm(full_gradient(model, X, train))),
                train_error=generalization_error(X, train),
                test_error=_test_error(X, test),
                grad_evals=steps * N,
                elapsed_ms=(time.perf_counter() - start) * 1000.0,
            )
        )
    out = reservoir if uniform else X
    return out.copy(), traces
