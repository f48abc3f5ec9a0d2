import math

import numpy as np
import pytest

from flowattn import autodiff as ad
from flowattn.data import gen_flow_classification
from flowattn.models import ModelConfig, build_model
from flowattn.training import (
    AdamState, EarlyStopping, OptimizerConfig, PlateauScheduler, TrainConfig, evaluate,
    load_checkpoint, mse_loss, nll_loss, optimizer_step, predict, save_checkpoint, train,
)

# ln(4), 40-digit decimal arithmetic
LN4 = 1.386294361119890618834


def samples(n=24, seed=0, need_dag=False):
    ds = gen_flow_classification(n, 7, seed)
    return [r.to_sample(need_dag) for r in ds.records]


def small_model(arch="attn", seed=0, **kw):
    return build_model(ModelConfig(arch=arch, input_dim=6, hidden_dim=4, num_layers=1, **kw), seed)


def param_arrays(model):
    return [p.data.copy() for p in model.parameters()]


class TestLosses:
    def test_nll_perfect(self):
        lp = np.log(np.array([[1.0, 1e-300], [1e-300, 1.0]]))
        assert nll_loss(lp, [0, 1]).item() == 0.0

    def test_nll_uniform(self):
        lp = np.full((3, 4), -math.log(4))
        assert nll_loss(lp, [0, 3, 2]).item() == pytest.approx(LN4, abs=1e-15)

    def test_nll_hand_sum(self):
        lp = np.array([[-0.1, -2.0], [-1.5, -0.3], [-0.7, -0.9]])
        assert nll_loss(lp, [0, 0, 1]).item() == pytest.approx((0.1 + 1.5 + 0.9) / 3, abs=1e-15)

    def test_nll_label_range(self):
        with pytest.raises(ValueError):
            nll_loss(np.zeros((1, 2)), [2])

    def test_mse(self):
        assert mse_loss([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).item() == 0.0
        assert mse_loss([0.0, 0.0], [1.0, 3.0]).item() == 5.0

    def test_mse_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            mse_loss([1.0], [1.0, 2.0])


def adam_oracle(p, grads, lr, wd=0.0, decoupled=False, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar straight-line Adam/AdamW."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        if decoupled:
            p = p - lr * wd * p
        else:
            g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestOptimizer:
    def test_first_step_size(self):
        p = np.array([0.0])
        optimizer_step([p], [np.array([1.0])], AdamState.zeros_like([p]), OptimizerConfig(lr=1e-3))
        assert p[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)

    @pytest.mark.parametrize("kind,wd", [("adam", 0.0), ("adam", 0.01), ("adamw", 0.01)])
    def test_matches_straight_line_oracle_over_100_steps(self, kind, wd):
        rng = np.random.default_rng(7)
        grads = rng.normal(size=(100, 3))
        p0 = rng.normal(size=3)
        p = p0.copy()
        cfg = OptimizerConfig(kind, 0.01, wd)
        state = AdamState.zeros_like([p])
        for g in grads:
            optimizer_step([p], [g], state, cfg)
        for k in range(3):
            expected = adam_oracle(p0[k], grads[:, k], 0.01, wd, kind == "adamw")
            assert abs(p[k] - expected) < 1e-12

    def test_adamw_zero_gradient_only_shrinks(self):
        p = np.array([2.0, -4.0])
        optimizer_step([p], [np.zeros(2)], AdamState.zeros_like([p]),
                       OptimizerConfig("adamw", 0.1, 0.5))
        np.testing.assert_array_equal(p, [2.0 * 0.95, -4.0 * 0.95])

    def test_zero_gradient_leaves_params(self):
        p = np.array([1.5, -0.5])
        optimizer_step([p], [None], AdamState.zeros_like([p]), OptimizerConfig())
        np.testing.assert_array_equal(p, [1.5, -0.5])

    def test_rejects_non_finite_gradient(self):
        p = np.zeros(1)
        with pytest.raises(ad.NonFiniteError):
            optimizer_step([p], [np.array([np.nan])], AdamState.zeros_like([p]), OptimizerConfig())

    def test_unknown_kind(self):
        p = np.zeros(1)
        with pytest.raises(ValueError):
            optimizer_step([p], [np.ones(1)], AdamState.zeros_like([p]), OptimizerConfig("sgd"))


class TestPlateauScheduler:
    def test_divides_after_patience(self):
        s = PlateauScheduler(1.0, factor=5, patience=3, maximize=True)
        lrs = [s.step(m) for m in (0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5)]
        assert lrs == [1.0, 1.0, 1.0, 0.2, 0.2, 0.2, 0.04]

    def test_improvement_resets(self):
        s = PlateauScheduler(1.0, patience=2, maximize=False)
        for m in (3.0, 3.0, 2.0, 2.0):
            s.step(m)
        assert s.lr == 1.0 and s.bad_epochs == 1

    def test_invalid(self):
        with pytest.raises(ValueError):
            PlateauScheduler(1.0, factor=1.0)


class TestEarlyStopping:
    def test_stops_after_patience(self):
        es = EarlyStopping(patience=2)
        assert [es.update(m, e) for e, m in enumerate((0.5, 0.6, 0.6, 0.55))] == \
            ["continue", "continue", "continue", "stop"]
        assert es.best_epoch == 1

    def test_restores_best(self):
        p = ad.parameter(np.array([1.0]))
        es = EarlyStopping(patience=5, maximize=False)
        es.update(1.0, 0, [p])
        p.data[0] = 9.0
        es.update(2.0, 1, [p])
        es.restore([p])
        assert p.data[0] == 1.0


class TestTrain:
    def test_zero_lr_leaves_params(self):
        model = small_model()
        before = param_arrays(model)
        data = samples()
        train(model, data[:16], data[16:], TrainConfig(lr=0.0, max_epochs=3))
        for a, b in zip(before, param_arrays(model)):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        data = samples()
        runs = []
        for _ in range(2):
            res = train(small_model(seed=3), data[:16], data[16:], TrainConfig(lr=0.01, max_epochs=4))
            runs.append((res.history, param_arrays(res.model)))
        assert runs[0][0] == runs[1][0]
        for a, b in zip(runs[0][1], runs[1][1]):
            np.testing.assert_array_equal(a, b)

    def test_history_and_loss_drop(self):
        data = samples(40)
        res = train(small_model(), data[:32], data[32:], TrainConfig(lr=0.02, max_epochs=15))
        assert set(res.history[0]) == {"epoch", "train_loss", "lr", "val_loss", "val_metric"}
        assert min(h["train_loss"] for h in res.history) < res.initial_train_loss

    def test_early_stopping_triggers(self):
        data = samples()
        res = train(small_model(), data[:16], data[16:], TrainConfig(
            lr=0.0, max_epochs=50, early_stop_patience=3))
        assert res.stopped_early and len(res.history) == 4

    def test_dag_model_trains(self):
        data = samples(need_dag=True)
        res = train(small_model("flowdagnn"), data[:16], data[16:], TrainConfig(lr=0.01, max_epochs=2))
        assert len(res.history) == 2

    def test_regression(self):
        data = samples()
        for k, s in enumerate(data):
            s.y = float(k % 3)
        model = small_model(num_classes=None)
        res = train(model, data[:16], data[16:], TrainConfig(lr=0.01, max_epochs=2, loss="mse"))
        assert res.report.rmse >= 0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            train(small_model(), samples(), [], TrainConfig(batch_size=0))

    def test_empty_train_split(self):
        with pytest.raises(ValueError):
            train(small_model(), [], samples(), TrainConfig())


class TestEvaluation:
    def test_predict_shapes(self):
        model, data = small_model(), samples(10)
        out = predict(model, data, batch_size=3)
        assert out.shape == (10, 2)
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)
        assert predict(model, []).shape == (0, 2)

    def test_batching_does_not_change_predictions(self):
        model, data = small_model(), samples(10)
        np.testing.assert_allclose(predict(model, data, 1), predict(model, data, 10), atol=1e-12)

    def test_evaluate_empty(self):
        with pytest.raises(ValueError):
            evaluate(small_model(), [])


class TestCheckpoint:
    @pytest.mark.parametrize("arch", ["attn", "dagnn", "flowdagnn"])
    def test_round_trip(self, tmp_path, arch):
        model = small_model(arch, seed=5)
        man, binary = save_checkpoint(model, tmp_path / "model")
        assert man.suffix == ".json" and binary.suffix == ".f64"
        loaded = load_checkpoint(tmp_path / "model")
        assert loaded.config == model.config
        for (n1, a), (n2, b) in zip(model.named_parameters(), loaded.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(a.data, b.data)
        data = samples(6, need_dag=arch != "attn")
        np.testing.assert_array_equal(predict(model, data), predict(loaded, data))

    def test_truncated_binary(self, tmp_path):
        save_checkpoint(small_model(), tmp_path / "m")
        f = tmp_path / "m.f64"
        f.write_bytes(f.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m")
