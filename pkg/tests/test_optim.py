import math

import numpy as np
import pytest

from expmachines.data import Dataset, SynthSpec, synth_generate
from expmachines.model import (
    FeatureSchema,
    LossSpec,
    encode,
    full_loss,
    linear_init,
    predict,
    predict_batch,
    predict_encoded,
)
from expmachines.optim import (
    TRACE_COLUMNS,
    ConfigError,
    NumericalError,
    TrainConfig,
    TraceRecord,
    TrainTrace,
    apply_dropout,
    armijo_step,
    core_gradients,
    dropout_batch,
    mean_loss,
    train,
    train_core_sgd,
    train_linear,
    train_riemannian,
)
from expmachines.riemannian import TangentVector, project_tangent, riemannian_gradient, tangent_space
from expmachines.tt import tt_from_cores, tt_materialize, tt_random


def small_synth(n=600, seed=0):
    train_ds, test_ds, _ = synth_generate(SynthSpec(n, n, d=6, m=3, order=2, seed=seed))
    return train_ds, test_ds


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.rho, cfg.c1, cfg.alpha_min, cfg.max_backtracks, cfg.keep_prob) == (0.5, 0.1, 1e-12, 40, 1.0)

    def test_violations_listed(self):
        with pytest.raises(ConfigError) as err:
            TrainConfig(rho=1.0, c1=0.5, keep_prob=0.0, batch_size=0)
        msg = str(err.value)
        for name in ("rho", "c1", "keep_prob", "batch_size"):
            assert name in msg

    def test_penalty_rejected(self):
        with pytest.raises(ConfigError, match="penalty"):
            TrainConfig(penalty="l1")
        with pytest.raises(ConfigError, match="penalty"):
            TrainConfig(penalty="l1", optimizer="core_sgd")

    def test_from_mapping(self):
        cfg = TrainConfig.from_mapping({"rank": "4", "lam": "0.5", "armijo-scope": "full", "optimizer": "core_sgd"})
        assert (cfg.rank, cfg.lam, cfg.armijo_scope, cfg.optimizer) == (4, 0.5, "full", "core_sgd")
        assert TrainConfig.from_mapping(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_mapping({"momentum": "0.9"})
        with pytest.raises(ConfigError, match="rank"):
            TrainConfig.from_mapping({"rank": "four"})


class TestLinear:
    def test_separable(self):
        X = np.array([[1.0, 2.0], [2.0, 1.0], [-1.0, -2.0], [-2.0, -0.5], [0.5, 1.5], [-1.5, -1.0]])
        y = np.array([1.0, 1, -1, -1, 1, -1])
        fit = train_linear(X, 0.0, "logistic", y, max_iter=500)
        assert np.all(np.sign(X @ fit.w + fit.b) == y)

    def test_exact_squared(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((50, 2))
        y = 2 * X[:, 0] - X[:, 1] + 1
        fit = train_linear(X, 0.0, "squared", y)
        assert fit.converged
        np.testing.assert_allclose(fit.w, [2.0, -1.0], atol=1e-6)
        assert fit.b == pytest.approx(1.0, abs=1e-6)

    def test_stationary_by_finite_differences(self):
        train_ds, _ = small_synth()
        fit = train_linear(train_ds, 0.5, "logistic")
        assert fit.converged
        X, y = train_ds.X, train_ds.y

        def f(w, b):
            return np.sum(np.logaddexp(0, -y * (X @ w + b))) + 0.25 * w @ w

        h = 1e-6
        theta = np.append(fit.w, fit.b)
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h
            plus, minus = theta + e, theta - e
            fd = (f(plus[:-1], plus[-1]) - f(minus[:-1], minus[-1])) / (2 * h)
            assert abs(fd) <= 1e-5

    def test_deterministic(self):
        train_ds, _ = small_synth()
        a, b = train_linear(train_ds, 0.1), train_linear(train_ds, 0.1)
        np.testing.assert_array_equal(a.w, b.w)
        assert a.b == b.b

    def test_empty(self):
        with pytest.raises(ValueError):
            train_linear(np.zeros((0, 2)), 0.0, "logistic", np.zeros(0))


class TestDropout:
    def test_keep_all(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(apply_dropout(x, 1.0, np.random.default_rng(0)), x)

    def test_all_zeroed_gives_bias(self):
        w = tt_random((2,) * 4, 3, seed=1)
        x = apply_dropout(np.ones(4), 1e-12, np.random.default_rng(0))
        assert np.all(x == 0)
        assert predict(w, x, FeatureSchema.numeric(4)) == pytest.approx(tt_materialize(w)[0, 0, 0, 0], rel=1e-12)

    def test_monte_carlo_rate(self):
        rng = np.random.default_rng(7)
        draws = np.stack([apply_dropout(np.ones(30), 0.95, rng) for _ in range(100_000)])
        assert abs(np.mean(draws == 0) - 0.05) <= 0.003

    def test_batch_masking(self):
        schema = FeatureSchema.from_text("numeric\ncategorical 3\n")
        batch = encode(np.array([[2.0, 3.0], [4.0, 1.0]]), schema)
        keep = np.array([[False, True], [True, False]])
        masked = batch.masked(keep)
        np.testing.assert_array_equal(masked.values[0], [[1, 0], [1, 4]])
        np.testing.assert_array_equal(masked.values[1], [[1, 0, 0, 1], [1, 0, 0, 0]])
        np.testing.assert_array_equal(masked.levels[1], [3, 0])
        w = tt_random(schema.mode_sizes, 2, seed=0)
        dropped = predict_encoded(w, masked)
        assert dropped[0] == pytest.approx(predict(w, [0.0, 3.0], schema), rel=1e-12)

    def test_batch_rate(self):
        train_ds, _ = small_synth(2000)
        batch = dropout_batch(train_ds.encoded(), 0.8, np.random.default_rng(3))
        off = np.mean(np.stack([v[:, 1] == 0 for v in batch.values]))
        sigma = math.sqrt(0.2 * 0.8 / (2000 * 6))
        assert abs(off - 0.2) <= 3 * sigma


def _eq10_holds(rec, c1):
    return rec.batch_loss <= rec.loss_before - c1 * rec.alpha * rec.grad_norm**2


class TestArmijo:
    def test_zero_gradient(self):
        w = tt_random((2, 2, 2), 2, seed=0)
        g = TangentVector.of_base(tangent_space(w)).scaled(0.0)
        res = armijo_step(w, g, 0.7, TrainConfig(rank=2), lambda p: 1.0)
        assert res.alpha == 0.7 and res.point is w and res.backtracks == 0 and not res.stalled

    def test_overshoot_backtracks(self):
        # One object with large features: curvature far above 1, so alpha = 1 overshoots.
        schema = FeatureSchema.numeric(3)
        x, y = np.array([[3.0, 3.0, 3.0]]), np.array([1.0])
        w = linear_init(np.array([0.1, 0.2, 0.3]), 0.0, target_rank=2)
        ds = Dataset(x, y, schema)
        loss = LossSpec("squared")
        cfg = TrainConfig(rank=2, loss="squared")
        g = riemannian_gradient(w, x, y, schema, loss)
        res = armijo_step(w, g, 1.0, cfg, lambda p: full_loss(p, ds, loss))
        assert res.alpha <= cfg.rho
        assert res.loss <= full_loss(w, ds, loss) - cfg.c1 * res.alpha * g.sq_norm()

    def test_stall(self):
        w = tt_random((2, 2, 2), 2, seed=0)
        g = project_tangent(w, w)
        cfg = TrainConfig(rank=2, alpha_min=0.3)
        res = armijo_step(w, g, 1.0, cfg, lambda p: 1.0, loss0=1.0)
        assert res.stalled and res.point is w

    def test_nan(self):
        w = tt_random((2, 2, 2), 2, seed=0)
        g = project_tangent(w, w)
        with pytest.raises(NumericalError):
            armijo_step(w, g, 1.0, TrainConfig(rank=2), lambda p: math.nan, loss0=1.0)


class TestRiemannianTraining:
    def test_zero_iterations(self):
        train_ds, _ = small_synth()
        cfg = TrainConfig(rank=2, iterations=0)
        w, trace = train_riemannian(train_ds, cfg)
        fit = train_linear(train_ds, 0.0)
        ref = linear_init(fit.w, fit.b, 2)
        for c1, c2 in zip(w.cores, ref.cores):
            np.testing.assert_array_equal(c1, c2)
        assert trace.records == []

    def test_warm_start_fidelity(self):
        train_ds, _ = small_synth()
        w, _ = train_riemannian(train_ds, TrainConfig(rank=2, iterations=0))
        fit = train_linear(train_ds, 0.0)
        np.testing.assert_allclose(predict_batch(w, train_ds.X, train_ds.schema), train_ds.X @ fit.w + fit.b, atol=1e-12)

    def test_linear_world(self):
        rng = np.random.default_rng(11)
        d = 5
        w_true, b_true = rng.standard_normal(d), 0.3
        X = rng.standard_normal((4000, d))
        margin = X @ w_true + b_true
        y = np.where(rng.random(4000) < 1 / (1 + np.exp(-3 * margin)), 1.0, -1.0)
        schema = FeatureSchema.numeric(d)
        train_ds = Dataset(X[:2000], y[:2000], schema)
        cfg = TrainConfig(rank=2, iterations=200, batch_size=100, seed=1)
        w, _ = train_riemannian(train_ds, cfg)
        acc = np.mean(np.sign(predict_batch(w, X[2000:], schema)) == y[2000:])
        bayes = np.mean(np.sign(margin[2000:]) == y[2000:])
        assert acc >= 0.95 * bayes

    def test_invariants(self):
        train_ds, _ = small_synth()
        cfg = TrainConfig(rank=3, iterations=60, batch_size=50, keep_prob=0.9, seed=2)
        ranks = []
        w, trace = train_riemannian(train_ds, cfg, callback=lambda t, w, tr: ranks.append(w.tt_ranks))
        assert len(trace.records) == 60
        assert all(max(r) <= 3 for r in ranks)
        for rec in trace.records:
            assert rec.accepted and _eq10_holds(rec, cfg.c1)
        assert np.all(np.diff(trace.column("iter")) == 1)

    def test_deterministic(self):
        train_ds, _ = small_synth()
        cfg = TrainConfig(rank=3, iterations=30, batch_size=40, keep_prob=0.9, seed=5)
        (w1, t1), (w2, t2) = train_riemannian(train_ds, cfg), train_riemannian(train_ds, cfg)
        for c1, c2 in zip(w1.cores, w2.cores):
            np.testing.assert_array_equal(c1, c2)
        assert t1.to_csv(include_wall=False) == t2.to_csv(include_wall=False)

    def test_full_scope(self):
        train_ds, _ = small_synth()
        cfg = TrainConfig(rank=2, iterations=15, batch_size=50, armijo_scope="full")
        w, trace = train_riemannian(train_ds, cfg)
        for rec in trace.records:
            if rec.accepted:
                assert rec.full_loss == rec.batch_loss
                assert _eq10_holds(rec, cfg.c1)
        accepted = [r.full_loss for r in trace.records if r.accepted]
        assert all(b <= a for a, b in zip(accepted, accepted[1:]))
        assert accepted[-1] == pytest.approx(mean_loss(w, train_ds, "logistic"), rel=1e-12)

    def test_full_loss_every(self):
        train_ds, _ = small_synth()
        _, trace = train_riemannian(train_ds, TrainConfig(rank=2, iterations=6, batch_size=20, full_loss_every=3))
        assert [r.full_loss is not None for r in trace.records] == [False, False, True, False, False, True]

    def test_stall_stops(self):
        # Large features under squared loss: the unit step overshoots and
        # alpha_min forbids any backtracking.
        base, _ = small_synth()
        train_ds = Dataset(5.0 * base.X, base.y, base.schema)
        cfg = TrainConfig(rank=2, iterations=50, batch_size=50, alpha_min=0.9, loss="squared")
        w0 = linear_init(np.full(6, 0.1), 0.0, 2)
        w, trace = train_riemannian(train_ds, cfg, w0=w0)
        assert w is w0
        assert trace.stalled
        assert not trace.records[-1].accepted
        assert len(trace.records) < 50

    def test_random_init(self):
        train_ds, _ = small_synth()
        w, _ = train_riemannian(train_ds, TrainConfig(rank=3, iterations=0, init="random", seed=4))
        np.testing.assert_array_equal(w.cores[0], tt_random(train_ds.schema.mode_sizes, 3, seed=4).cores[0])

    def test_categorical_schema(self):
        schema = FeatureSchema.from_text("categorical 3\nnumeric [square]\ncategorical 2\n")
        rng = np.random.default_rng(0)
        X = np.column_stack([rng.integers(1, 4, 500), rng.standard_normal(500), rng.integers(1, 3, 500)])
        y = np.where((X[:, 0] == 2) ^ (X[:, 2] == 1), 1.0, -1.0)
        ds = Dataset(X, y, schema)
        w, trace = train(ds, TrainConfig(rank=3, iterations=80, batch_size=50, seed=0))
        assert w.mode_sizes == (4, 3, 3)
        assert mean_loss(w, ds, "logistic") < trace.records[0].loss_before


class TestCoreSGD:
    def test_gradients_finite_differences(self):
        rng = np.random.default_rng(0)
        schema = FeatureSchema.numeric(4)
        w = tt_random((2,) * 4, 2, seed=1)
        x, y = rng.standard_normal((1, 4)), np.array([-1.0])
        loss, lam = LossSpec("logistic"), 0.3
        ds = Dataset(x, y, schema)
        yhat = predict_batch(w, x, schema)
        grads = core_gradients(w.cores, encode(x, schema), loss.deriv(yhat, y), lam)
        h = 1e-6
        for k, core in enumerate(w.cores):
            fd = np.zeros_like(core)
            for pos in np.ndindex(core.shape):
                cores_p = [c.copy() for c in w.cores]
                cores_m = [c.copy() for c in w.cores]
                cores_p[k][pos] += h
                cores_m[k][pos] -= h
                fd[pos] = (
                    full_loss(tt_from_cores(cores_p), ds, loss, lam) - full_loss(tt_from_cores(cores_m), ds, loss, lam)
                ) / (2 * h)
            np.testing.assert_allclose(grads[k], fd, rtol=1e-5, atol=1e-9)

    def test_zero_iterations(self):
        train_ds, _ = small_synth()
        w, _ = train_core_sgd(train_ds, TrainConfig(rank=3, iterations=0, optimizer="core_sgd"))
        w2, _ = train_riemannian(train_ds, TrainConfig(rank=3, iterations=0))
        for c1, c2 in zip(w.cores, w2.cores):
            np.testing.assert_array_equal(c1, c2)

    def test_rank_fixed_and_descent(self):
        train_ds, _ = small_synth()
        cfg = TrainConfig(rank=3, iterations=40, batch_size=50, optimizer="core_sgd")
        shapes = []
        w, trace = train(train_ds, cfg, callback=lambda t, w, tr: shapes.append(w.tt_ranks))
        assert set(shapes) == {w.tt_ranks}
        assert all(_eq10_holds(r, cfg.c1) for r in trace.records if r.accepted)


def test_trace_csv_header():
    train_ds, _ = small_synth()
    _, trace = train(train_ds, TrainConfig(rank=2, iterations=3, batch_size=10))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "iter,alpha,batch_loss,full_loss,grad_norm,backtracks,wall_ms"
    assert lines[0].split(",") == list(TRACE_COLUMNS)
    assert len(lines) == 4
    cells = lines[1].split(",")
    assert cells[3] == "" and float(cells[6]) > 0
    assert trace.to_csv(include_wall=False).splitlines()[1].endswith(",")


def test_trace_monotone():
    tr = TrainTrace()
    tr.append(TraceRecord(1, 0.1, 1.0, 0.5, None, 0.1, 0, 1.0))
    with pytest.raises(ValueError):
        tr.append(TraceRecord(1, 0.1, 1.0, 0.5, None, 0.1, 0, 1.0))
