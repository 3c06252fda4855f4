"""Acceptance suite: one test per criterion, each at its stated tolerance.

Running ``pytest -v tests/test_acceptance.py`` prints one pass/fail line per
criterion.  The synthetic benchmark (100 points, 10 dimensions, variance
1/20, 10000 noiseless training triplets, STE, 5 trials) is built once and
shared by the criteria that consume it.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ordembed import (
    LossModel,
    OptimizerConfig,
    SynthConfig,
    average_precisions,
    load_comparisons,
    loss_gradient,
    loss_value,
    margin,
    mean_average_precision,
    min_inner_length,
    precision_recall_at_k,
    run,
    triplet_gradient_via_chain_rule,
)
from ordembed.losses import KINDS
from ordembed.metrics import LabeledEmbedding
from ordembed.cli import ExperimentSpec, cmd_generate, init_embedding, main

from _oracles import (
    brute_average_precisions,
    brute_map,
    brute_precision_recall,
    fd_gradient,
    inner_products,
    min_inner_length_reference,
    relative_gradient_error,
    sbb_reference,
)


def make_model(kind, d=4):
    if kind == "tste":
        return LossModel("tste", alpha=float(max(d - 1, 1)))
    return LossModel(kind)


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Five SVRG-SBB and five batch runs on the standard synthetic instance."""
    start = time.perf_counter()
    data_dir = tmp_path_factory.mktemp("benchmark")
    spec = ExperimentSpec(
        synth=SynthConfig(),
        model=LossModel("ste"),
        optimizer=OptimizerConfig(
            method="svrg-sbb", epochs=20, epsilon=0.005, eta0=0.1, seed=0
        ),
        trials=5,
        dim=10,
        init_scale=0.1,
    )
    manifest = cmd_generate(spec, str(data_dir))
    assert manifest["counts"]["total"] == 485100
    assert manifest["counts"]["train"] == 10_000
    train = load_comparisons(str(data_dir / "train.txt"), n=100)
    test = load_comparisons(str(data_dir / "test.txt"), n=100)
    model = LossModel("ste")
    captures = []

    def capture(s, snapshot, full_grad, eta):
        captures.append((s, snapshot, full_grad, eta))

    svrg_traces = []
    batch_traces = []
    for t in range(spec.trials):
        X0 = init_embedding(100, 10, t, 0.1)
        _, traces = run(
            model,
            train,
            test,
            X0,
            replace(spec.optimizer, seed=t),
            epoch_callback=capture if t == 0 else None,
        )
        svrg_traces.append(traces)
        _, btraces = run(
            model,
            train,
            test,
            X0,
            OptimizerConfig(method="batch", epochs=20, eta0=0.1, seed=t),
        )
        batch_traces.append(btraces)
    return {
        "svrg": svrg_traces,
        "batch": batch_traces,
        "captures": captures,
        "m": len(train),
        "epsilon": 0.005,
        "elapsed": time.perf_counter() - start,
    }


def test_criterion_01_gradients_match_finite_differences():
    """Each loss's analytic gradient agrees with central differences to 1e-5
    on 100 random bounded embeddings, in under 10 seconds."""
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    for kind in KINDS:
        model = make_model(kind)
        checked = 0
        while checked < 100:
            X = rng.uniform(-1.0, 1.0, size=(8, 4))
            i, j, l, k = (int(v) for v in rng.integers(0, 8, size=4))
            if i == j or l == k:
                continue
            p = (i, j, l, k)
            if kind == "gnmds" and abs(1.0 + margin(X, p)) < 1e-4:
                continue
            analytic = loss_gradient(model, X, p).to_dense(8)
            numeric = fd_gradient(lambda Y: loss_value(model, Y, p), X, step=1e-5)
            assert relative_gradient_error(analytic, numeric) < 1e-5
            checked += 1
    assert time.perf_counter() - start < 10.0


def test_criterion_02_chain_rule_identity():
    """Triplet gradients equal slot-merged quadruplet gradients to 1e-12
    on 1000 random cases."""
    rng = np.random.default_rng(202)
    for case in range(1000):
        n = int(rng.integers(4, 11))
        d = int(rng.integers(1, 6))
        X = rng.uniform(-1.0, 1.0, size=(n, d))
        i, j, k = (int(v) for v in rng.choice(n, size=3, replace=False))
        model = make_model(KINDS[case % 4], d=d)
        via_chain = triplet_gradient_via_chain_rule(model, X, (i, j, k)).to_dense(n)
        via_quad = loss_gradient(model, X, (i, j, i, k)).to_dense(n)
        assert np.max(np.abs(via_chain - via_quad)) <= 1e-12


def test_criterion_03_sbb_bound_and_identity(benchmark):
    """On a stabilized run every step obeys eta <= 1/(m eps) and satisfies
    the defining identity to 1e-12 relative error."""
    m = benchmark["m"]
    eps = benchmark["epsilon"]
    bound = 1.0 / (m * eps)
    for traces in benchmark["svrg"]:
        for t in traces:
            assert 0.0 < t.eta <= bound
    captures = benchmark["captures"]
    assert len(captures) == 20
    trace0 = benchmark["svrg"][0]
    for idx in range(1, len(captures)):
        s, X_cur, g_cur, eta = captures[idx]
        _, X_prev, g_prev, _ = captures[idx - 1]
        assert s == idx
        assert eta == trace0[idx].eta
        nrm2, ip = inner_products(X_cur, X_prev, g_cur, g_prev)
        identity = eta * m * (abs(ip) + eps * nrm2)
        assert identity == pytest.approx(nrm2, rel=1e-12)
        assert eta == pytest.approx(sbb_reference(X_cur, X_prev, g_cur, g_prev, m, eps), rel=1e-12)


def test_criterion_04_inner_length_bound_routine():
    """min_inner_length(1, 1) = 5 and the value is monotone non-increasing
    in epsilon, matching an independent high-precision evaluation."""
    assert min_inner_length(1.0, 1.0) == 5
    grid = np.logspace(-2, 1, 50)
    values = [min_inner_length(1.0, float(eps)) for eps in grid]
    assert all(a >= b for a, b in zip(values, values[1:]))
    for eps, value in zip(grid, values):
        assert value == min_inner_length_reference(1.0, float(eps))


def test_criterion_05_benchmark_reproduction(benchmark):
    """Median held-out error reaches 0.15 within 20 epochs and beats batch
    descent at the matched gradient budget, inside the 2-minute budget."""
    svrg = benchmark["svrg"]
    batch = benchmark["batch"]
    medians = [float(np.median([tr[s].test_error for tr in svrg])) for s in range(20)]
    assert min(medians) <= 0.15
    batch_final = float(np.median([tr[19].test_error for tr in batch]))
    assert medians[19] <= batch_final
    assert svrg[0][19].grad_evals == batch[0][19].grad_evals == 600_000
    assert benchmark["elapsed"] < 120.0


def test_criterion_06_step_size_stabilization(benchmark):
    """Stabilized steps change by less than 10x between consecutive epochs
    (from epoch 2 on); the raw step-magnitude diagnostic is recorded."""
    for traces in benchmark["svrg"]:
        etas = [t.eta for t in traces]
        ratios = [etas[s + 1] / etas[s] for s in range(2, len(etas) - 1)]
        assert max(ratios) < 10.0
        assert min(ratios) > 0.1
        for t in traces[1:]:
            assert not math.isnan(t.eta_bb_abs)


def test_criterion_07_retrieval_metrics_match_brute_force():
    """Precision@K, Recall@K, and MAP equal brute-force counting on 50
    random 12-point 3-class instances; single-relevant AP equals 1/r."""
    rng = np.random.default_rng(700)
    checked = 0
    while checked < 50:
        labels = rng.integers(0, 3, size=12)
        if np.bincount(labels, minlength=3).min() < 2:
            continue
        X = rng.standard_normal((12, 3))
        L = LabeledEmbedding(X, labels)
        for K in range(1, 12):
            assert precision_recall_at_k(L, K) == brute_precision_recall(X, labels, K)
        assert list(average_precisions(L, 11)) == brute_average_precisions(X, labels, 11)
        assert mean_average_precision(L, 11) == brute_map(X, labels, 11)
        checked += 1
    for r in range(1, 12):
        X = np.arange(12, dtype=np.float64)[:, None]
        labels = ["only-%d" % i for i in range(12)]
        labels[0] = "shared"
        labels[r] = "shared"
        L = LabeledEmbedding(X, np.array(labels))
        assert average_precisions(L, 11)[0] == 1.0 / r


def test_criterion_08_training_is_deterministic(tmp_path):
    """Two train runs from one manifest produce identical traces aside from
    wall-clock columns."""
    data_dir = tmp_path / "data"
    spec = ExperimentSpec(
        synth=SynthConfig(n=24, d_true=4, num_train=600, noise_fraction=0.05, seed=7),
        model=LossModel("ste"),
        optimizer=OptimizerConfig(method="svrg-sbb", epochs=4, epsilon=0.005, eta0=0.1, seed=3),
        trials=2,
        dim=4,
        init_scale=0.1,
    )
    cmd_generate(spec, str(data_dir))
    manifest_path = str(data_dir / "manifest.json")
    run_dirs = [tmp_path / "run_a", tmp_path / "run_b"]
    for run_dir in run_dirs:
        assert main(["train", "--config", manifest_path, "--out", str(run_dir)]) == 0

    def stripped_trace(path):
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[-1] == "elapsed_ms"
        return [line.rsplit(",", 1)[0] for line in lines]

    for t in range(2):
        trace_a = stripped_trace(run_dirs[0] / f"trial_{t:02d}_trace.csv")
        trace_b = stripped_trace(run_dirs[1] / f"trial_{t:02d}_trace.csv")
        assert trace_a == trace_b
        emb_a = (run_dirs[0] / f"trial_{t:02d}_embedding.csv").read_bytes()
        emb_b = (run_dirs[1] / f"trial_{t:02d}_embedding.csv").read_bytes()
        assert emb_a == emb_b
    agg_a = (run_dirs[0] / "aggregate.csv").read_bytes()
    agg_b = (run_dirs[1] / "aggregate.csv").read_bytes()
    assert agg_a == agg_b
