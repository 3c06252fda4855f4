"""Step-size rules, the run loop, baselines, traces, and error handling."""
import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ordembed import (
    DegenerateStepError,
    DivergenceError,
    LossModel,
    NonFiniteInputError,
    NumericError,
    OptimizerConfig,
    SynthConfig,
    UnstableStepError,
    UsageError,
    bb_step_size,
    enumerate_triplets,
    generate_points,
    margins,
    min_inner_length,
    run,
    sbb_step_size,
    split,
    write_trace_csv,
)
from ordembed.cli import init_embedding
from ordembed.optimizer import TRACE_COLUMNS, EpochTrace

from _oracles import min_inner_length_reference, sbb_reference


def small_instance(seed=0, n=12, d=3, num_train=220):
    """A tiny but non-trivial training problem: 220 train / 440 test triplets."""
    cfg = SynthConfig(n=n, d_true=d, variance=0.05, num_train=num_train, seed=seed)
    X_true = generate_points(cfg)
    universe = enumerate_triplets(X_true)
    train, test = split(universe, num_train, seed + 1)
    return X_true, train, test


def traces_equal(a, b):
    """Trace lists equal in every field except wall-clock time."""
    if len(a) != len(b):
        return False
    for ta, tb in zip(a, b):
        fields = ("epoch", "eta", "grad_norm", "train_error", "test_error", "grad_evals")
        if any(getattr(ta, f) != getattr(tb, f) for f in fields):
            # NaN test errors compare unequal; treat NaN == NaN as equal here.
            for f in fields:
                va, vb = getattr(ta, f), getattr(tb, f)
                if va != vb and not (
                    isinstance(va, float) and math.isnan(va) and math.isnan(vb)
                ):
                    return False
    return True


class TestBBStep:
    def test_quadratic_curvature(self):
        X_prev = np.zeros((2, 2))
        X_cur = np.array([[1.0, 0.0], [0.0, 2.0]])
        g_prev = np.zeros((2, 2))
        assert bb_step_size(X_cur, X_prev, X_cur, g_prev, m=10) == pytest.approx(0.1)

    def test_negative_curvature_keeps_sign(self):
        X_prev = np.zeros((2, 2))
        X_cur = np.array([[1.0, 0.0], [0.0, 2.0]])
        g_cur = -X_cur
        assert bb_step_size(X_cur, X_prev, g_cur, np.zeros((2, 2)), m=10) == pytest.approx(-0.1)

    def test_degenerate_difference(self):
        X = np.ones((2, 2))
        with pytest.raises(DegenerateStepError):
            bb_step_size(X, X, np.ones((2, 2)), np.zeros((2, 2)), m=5)

    def test_orthogonal_gradient_difference(self):
        X_prev = np.zeros((1, 2))
        X_cur = np.array([[1.0, 0.0]])
        g_cur = np.array([[0.0, 1.0]])
        with pytest.raises(UnstableStepError):
            bb_step_size(X_cur, X_prev, g_cur, np.zeros((1, 2)), m=5)

    def test_magnitude_dominates_stabilized_step(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            X_prev = rng.standard_normal((4, 3))
            X_cur = X_prev + rng.standard_normal((4, 3))
            g_prev = rng.standard_normal((4, 3))
            g_cur = g_prev + rng.standard_normal((4, 3))
            raw = abs(bb_step_size(X_cur, X_prev, g_cur, g_prev, m=7))
            stab = sbb_step_size(X_cur, X_prev, g_cur, g_prev, m=7, epsilon=0.05)
            assert raw >= stab


class TestSBBStep:
    def test_zero_gradient_difference_hits_bound(self):
        X_prev = np.zeros((3, 2))
        X_cur = np.arange(6, dtype=float).reshape(3, 2) + 1.0
        g = np.ones((3, 2))
        got = sbb_step_size(X_cur, X_prev, g, g, m=100, epsilon=0.005)
        assert got == pytest.approx(2.0, rel=1e-15)

    def test_epsilon_zero_reduces_to_raw_magnitude(self):
        X_prev = np.zeros((2, 2))
        X_cur = np.array([[1.0, 0.0], [0.0, 2.0]])
        got = sbb_step_size(X_cur, X_prev, X_cur, np.zeros((2, 2)), m=10, epsilon=0.0)
        assert got == pytest.approx(0.1, rel=1e-15)

    def test_matches_reference_and_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            X_prev = rng.standard_normal((5, 4))
            X_cur = X_prev + 0.1 * rng.standard_normal((5, 4))
            g_prev = rng.standard_normal((5, 4))
            g_cur = g_prev + rng.standard_normal((5, 4))
            m = int(rng.integers(1, 50))
            eps = float(rng.uniform(0.001, 1.0))
            got = sbb_step_size(X_cur, X_prev, g_cur, g_prev, m=m, epsilon=eps)
            ref = sbb_reference(X_cur, X_prev, g_cur, g_prev, m, eps)
            assert got == pytest.approx(ref, rel=1e-12)
            assert 0.0 < got <= (1.0 / (m * eps)) * (1.0 + 1e-12)

    def test_degenerate_and_unstable_errors(self):
        X = np.ones((2, 2))
        with pytest.raises(DegenerateStepError):
            sbb_step_size(X, X, np.ones((2, 2)), np.zeros((2, 2)), m=5, epsilon=0.1)
        X_prev = np.zeros((1, 2))
        X_cur = np.array([[1.0, 0.0]])
        g_cur = np.array([[0.0, 1.0]])
        with pytest.raises(UnstableStepError):
            sbb_step_size(X_cur, X_prev, g_cur, np.zeros((1, 2)), m=5, epsilon=0.0)

    def test_argument_validation(self):
        X_prev = np.zeros((2, 2))
        X_cur = np.ones((2, 2))
        g = np.ones((2, 2))
        with pytest.raises(UsageError):
            sbb_step_size(X_cur, X_prev, g, g, m=0, epsilon=0.1)
        with pytest.raises(UsageError):
            sbb_step_size(X_cur, X_prev, g, g, m=5, epsilon=-0.1)
        with pytest.raises(UsageError):
            sbb_step_size(X_cur, np.zeros((3, 2)), g, g, m=5, epsilon=0.1)


class TestMinInnerLength:
    def test_unit_values(self):
        assert min_inner_length(1.0, 1.0) == 5

    def test_vanishing_smoothness_limit(self):
        assert min_inner_length(1e-12, 1.0) == 3

    def test_monotone_in_epsilon(self):
        values = [min_inner_length(1.0, eps) for eps in np.logspace(-2, 1, 40)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_doubling_epsilon_never_increases(self):
        for eps in (0.01, 0.05, 0.3, 1.0, 4.0):
            assert min_inner_length(1.0, 2 * eps) <= min_inner_length(1.0, eps)

    def test_matches_high_precision_reference(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            L = float(rng.uniform(0.1, 4.0))
            eps = float(rng.uniform(0.05, 5.0))
            assert min_inner_length(L, eps) == min_inner_length_reference(L, eps)

    def test_argument_validation(self):
        for bad in (0.0, -1.0, math.inf, math.nan):
            with pytest.raises(UsageError):
                min_inner_length(bad, 1.0)
            with pytest.raises(UsageError):
                min_inner_length(1.0, bad)


class TestOptimizerConfig:
    def test_defaults_validate(self):
        OptimizerConfig().validate()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"method": "adam"},
            {"output_rule": "best"},
            {"m": 0},
            {"m": 2.5},
            {"epochs": -1},
            {"epochs": 1.5},
            {"epsilon": -0.1},
            {"epsilon": math.nan},
            {"eta0": 0.0},
            {"eta0": math.inf},
            {"seed": -1},
            {"seed": "zero"},
        ],
    )
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises(UsageError):
            OptimizerConfig(**kwargs).validate()

    def test_unstabilized_sbb_needs_explicit_promise(self):
        with pytest.raises(UsageError):
            OptimizerConfig(epsilon=0.0).validate()
        OptimizerConfig(epsilon=0.0, assume_nonzero_curvature=True).validate()
        OptimizerConfig(method="svrg-fixed", epsilon=0.0).validate()

    def test_resolved_fills_inner_length(self):
        assert OptimizerConfig().resolved(123).m == 123
        assert OptimizerConfig(m=7).resolved(123).m == 7

    def test_from_dict_round_trip(self):
        cfg = OptimizerConfig(method="sgd", m=50, epochs=4, eta0=0.2, seed=9)
        assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_accepts_epoch_count_alias(self):
        cfg = OptimizerConfig.from_dict({"S": 3})
        assert cfg.epochs == 3

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(UsageError, match="unknown optimizer config keys"):
            OptimizerConfig.from_dict({"momentum": 0.9})


class TestRunLoop:
    def run_small(self, method="svrg-sbb", epochs=3, seed=0, **kwargs):
        X_true, train, test = small_instance(seed=seed)
        X0 = init_embedding(12, 3, seed, 0.1)
        cfg = OptimizerConfig(method=method, epochs=epochs, seed=seed, **kwargs)
        return run(LossModel("ste"), train, test, X0, cfg), X0, train, test

    def test_deterministic_repetition(self):
        (X_a, traces_a), _, _, _ = self.run_small()
        (X_b, traces_b), _, _, _ = self.run_small()
        assert_array_equal(X_a, X_b)
        assert traces_equal(traces_a, traces_b)

    def test_zero_epochs_returns_initialization(self):
        (X_out, traces), X0, _, _ = self.run_small(epochs=0)
        assert traces == []
        assert_array_equal(X_out, X0)
        assert X_out is not X0

    def test_input_embedding_never_mutated(self):
        X_true, train, test = small_instance()
        X0 = init_embedding(12, 3, 0, 0.1)
        before = X0.copy()
        run(LossModel("ste"), train, test, X0, OptimizerConfig(epochs=2))
        assert_array_equal(X0, before)

    def test_progress_on_small_instance(self):
        (X_out, traces), X0, train, test = self.run_small(epochs=10)
        assert traces[-1].train_error < traces[0].train_error
        assert traces[-1].train_error < 0.2

    def test_hinge_stationary_start_keeps_iterate_and_reuses_step(self):
        X_true, train, _ = small_instance()
        strong = margins(X_true, train) < -0.05
        subset = train.subset(np.flatnonzero(strong)[:60])
        X0 = X_true * math.sqrt(40.0)
        cfg = OptimizerConfig(epochs=3, eta0=0.25, seed=1)
        X_out, traces = run(LossModel("gnmds"), subset, None, X0, cfg)
        assert_array_equal(X_out, X0)
        assert [t.step_reused for t in traces] == [False, True, True]
        assert all(t.eta == 0.25 for t in traces)
        assert all(t.train_error == 0.0 for t in traces)
        assert all(t.grad_norm == 0.0 for t in traces)

    def test_variance_reduction_cancels_at_snapshot(self):
        X_true, train, test = small_instance()
        X0 = init_embedding(12, 3, 0, 0.1)
        cfg = OptimizerConfig(epochs=3, seed=0)
        grads = {}
        first_directions = {}

        def on_epoch(s, snapshot, g, eta):
            grads[s] = g

        def on_step(s, t, pick, X_before, direction):
            if t == 0:
                first_directions[s] = direction

        run(
            LossModel("ste"),
            train,
            test,
            X0,
            cfg,
            epoch_callback=on_epoch,
            step_callback=on_step,
        )
        assert set(first_directions) == {0, 1, 2}
        for s, direction in first_directions.items():
            assert_array_equal(direction, grads[s])

    def test_gradient_evaluation_accounting_svrg(self):
        (X_out, traces), _, train, _ = self.run_small(epochs=4, m=37)
        N = len(train)
        for s, t in enumerate(traces):
            assert t.grad_evals == (s + 1) * (N + 2 * 37)

    def test_gradient_evaluation_accounting_sgd(self):
        (X_out, traces), _, train, _ = self.run_small(method="sgd", epochs=3)
        N = len(train)
        for s, t in enumerate(traces):
            assert t.grad_evals == (s + 1) * 3 * N

    def test_gradient_evaluation_accounting_batch(self):
        (X_out, traces), _, train, _ = self.run_small(method="batch", epochs=3, eta0=0.05)
        N = len(train)
        block = 3 * N
        for s, t in enumerate(traces):
            steps = ((s + 1) * block) // N
            assert t.grad_evals == steps * N
            assert t.grad_evals <= (s + 1) * block < t.grad_evals + N

    def test_sgd_step_decay(self):
        (X_out, traces), _, _, _ = self.run_small(method="sgd", epochs=4, eta0=0.2)
        assert [t.eta for t in traces] == [0.2 / (1 + s) for s in range(4)]

    def test_fixed_step_stays_fixed(self):
        (X_out, traces), _, _, _ = self.run_small(method="svrg-fixed", epochs=4, eta0=0.07)
        assert all(t.eta == 0.07 for t in traces)

    def test_sbb_steps_respect_upper_bound(self):
        (X_out, traces), _, train, _ = self.run_small(epochs=6, epsilon=0.01)
        bound = 1.0 / (len(train) * 0.01)
        for t in traces[1:]:
            assert 0.0 < t.eta <= bound * (1.0 + 1e-12)
            assert not math.isnan(t.eta_bb_abs)

    def test_warmup_step_clamped_to_sbb_bound(self):
        # eta0 above 1/(m*epsilon) is capped so the bound holds at epoch 0 too.
        (_, traces), _, train, _ = self.run_small(epochs=1, eta0=5.0, epsilon=0.01)
        assert traces[0].eta == 1.0 / (len(train) * 0.01)
        (_, traces), _, _, _ = self.run_small(
            method="svrg-fixed", epochs=1, eta0=5.0, epsilon=0.01
        )
        assert traces[0].eta == 5.0

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_reports_epoch(self):
        # A tiny epsilon leaves the step bound far above 1e9, so the huge
        # warm-up step survives clamping and blows up the iterates.
        with pytest.raises(DivergenceError) as excinfo:
            self.run_small(eta0=1e9, epochs=2, epsilon=1e-12)
        assert excinfo.value.epoch == 0
        assert isinstance(excinfo.value, NumericError)

    def test_non_finite_start_rejected(self):
        X_true, train, test = small_instance()
        X0 = init_embedding(12, 3, 0, 0.1)
        X0[0, 0] = math.nan
        with pytest.raises(NonFiniteInputError):
            run(LossModel("ste"), train, test, X0, OptimizerConfig(epochs=1))

    def test_empty_training_set_rejected(self):
        from ordembed import ComparisonSet

        X0 = init_embedding(4, 2, 0, 0.1)
        empty = ComparisonSet(np.zeros((0, 4), dtype=np.int64), n=4)
        with pytest.raises(UsageError):
            run(LossModel("ste"), empty, None, X0, OptimizerConfig(epochs=1))

    def test_mismatched_test_set_rejected(self):
        from ordembed import ComparisonSet

        X_true, train, _ = small_instance()
        X0 = init_embedding(12, 3, 0, 0.1)
        test = ComparisonSet.from_comparisons([(0, 1, 0, 20)], n=21)
        with pytest.raises(UsageError):
            run(LossModel("ste"), train, test, X0, OptimizerConfig(epochs=1))

    def test_unknown_method_rejected_at_run(self):
        X_true, train, test = small_instance()
        X0 = init_embedding(12, 3, 0, 0.1)
        with pytest.raises(UsageError):
            run(LossModel("ste"), train, test, X0, OptimizerConfig(method="newton"))

    def test_missing_test_set_records_nan(self):
        X_true, train, _ = small_instance()
        X0 = init_embedding(12, 3, 0, 0.1)
        X_out, traces = run(LossModel("ste"), train, None, X0, OptimizerConfig(epochs=2))
        assert all(math.isnan(t.test_error) for t in traces)

    def test_uniform_random_iterate_shares_trajectory(self):
        (X_last, traces_last), _, _, _ = self.run_small(epochs=3)
        (X_uni, traces_uni), _, _, _ = self.run_small(epochs=3, output_rule="uniform-random-iterate")
        assert traces_equal(traces_last, traces_uni)
        (X_uni2, _), _, _, _ = self.run_small(epochs=3, output_rule="uniform-random-iterate")
        assert_array_equal(X_uni, X_uni2)
        assert not np.array_equal(X_uni, X_last)


class TestTraceCSV:
    def test_header_and_round_trip(self, tmp_path):
        traces = [
            EpochTrace(0, 0.1, 1.25, 0.5, 0.4375, 660, 12.5),
            EpochTrace(1, 0.012345678901234567, 0.75, 0.25, 0.125, 1320, 31.5),
        ]
        path = tmp_path / "trace.csv"
        write_trace_csv(str(path), traces)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(TRACE_COLUMNS)
        assert len(lines) == 3
        fields = lines[2].split(",")
        assert int(fields[0]) == 1
        assert float(fields[1]) == 0.012345678901234567
        assert int(fields[5]) == 1320
