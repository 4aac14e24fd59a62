import math

import numpy as np
import pytest

from mmlatch import tensor as T
from mmlatch.data import generate_gated_dataset
from mmlatch.metrics import METRIC_NAMES, MetricsReport
from mmlatch.tensor import Tensor
from mmlatch.training import (
    Adam,
    Plateau,
    SeedRun,
    TrainConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    history_csv,
    mae_loss,
    run_experiment,
    summarize,
    train,
)

from conftest import max_grad_error


@pytest.fixture(scope="module")
def small_splits():
    return generate_gated_dataset(30, length=3, dims={"A": 4, "T": 5, "V": 4}, seed=2)


def small_config(**kw):
    base = dict(hidden=4, max_epochs=3, batch_size=8, dropout=0.1, initial_lr=1e-2)
    base.update(kw)
    return TrainConfig(**base)


class TestMAELoss:
    def test_exact(self):
        assert mae_loss(Tensor([[0.5], [1.0]]), np.array([[0.5], [1.0]])).item() == 0.0

    def test_value(self):
        assert mae_loss(Tensor([[1.0], [-1.0]]), np.zeros((2, 1))).item() == 1.0

    def test_gradient_is_sign_over_batch(self):
        pred = Tensor([[0.3], [-1.2], [2.0], [0.1]], requires_grad=True)
        target = np.array([[0.0], [0.5], [1.0], [1.0]])
        T.backward(mae_loss(pred, target))
        np.testing.assert_array_equal(pred.grad, np.sign(pred.data - target) / 4)
        assert max_grad_error(lambda: mae_loss(pred, target), [pred]) < 1e-8

    def test_shape_and_empty_errors(self):
        with pytest.raises(ValueError):
            mae_loss(Tensor(np.zeros((2, 1))), np.zeros((3, 1)))
        with pytest.raises(ValueError):
            mae_loss(Tensor(np.zeros((0, 1))), np.zeros((0, 1)))


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert opt.steps == 1

    def test_first_step_is_lr_times_sign(self):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([("p", p)], lr=0.01)
        p.grad = np.array([3.7])
        opt.step()
        assert p.data[0] == pytest.approx(-0.01, rel=1e-8)

    def test_two_step_hand_trace(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        expected = 1.0
        m = v = 0.0
        for t, g in enumerate([0.5, -0.2], start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expected -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            p.grad = np.array([g])
            opt.step()
            assert abs(p.data[0] - expected) < 1e-12
        # independently worked numbers: step 1 moves by 0.1 * 0.5 / (0.5 + 1e-8)
        assert abs(expected - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * (0.025 / 0.19) / (math.sqrt(0.00028975 / 0.001999) + 1e-8))) < 1e-12

    def test_gradients_cleared(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam([("p", p)])
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_non_finite_gradient_names_parameter(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam([("encoders.A.fwd.w_ih", p)])
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="encoders.A.fwd.w_ih"):
            opt.step()
        assert p.data[0] == 1.0


class TestPlateau:
    def replay(self, losses, halve=2, stop=10):
        plateau = Plateau(halve, stop)
        events = []
        for loss in losses:
            events.append(plateau.update(loss))
            if events[-1][2]:
                break
        return events

    def test_halving_after_two_flat_epochs(self):
        events = self.replay([1.0, 1.0, 1.0, 0.5, 0.6, 0.7, 0.8, 0.9])
        halvings = [i for i, (_, h, _) in enumerate(events) if h]
        assert halvings == [2, 5, 7]

    def test_stops_exactly_after_patience(self):
        events = self.replay([1.0] + [1.0] * 20)
        assert len(events) == 11 and events[-1][2]
        assert not any(stop for _, _, stop in events[:-1])

    def test_improvement_resets_both_counters(self):
        losses = [1.0] + [1.5] * 9 + [0.9] + [1.5] * 9
        events = self.replay(losses)
        assert len(events) == len(losses)
        assert not any(stop for _, _, stop in events)

    def test_tolerance(self):
        plateau = Plateau(2, 10, tol=1e-6)
        assert plateau.update(1.0)[0]
        assert not plateau.update(1.0 - 5e-7)[0]
        assert plateau.update(1.0 - 2e-6)[0]


class TestTrain:
    def test_zero_epochs(self, small_splits):
        model = build_model(small_config(), small_splits.dims)
        before = model.state_dict()
        model, history = train(model, small_splits.train, small_splits.val, small_config(max_epochs=0))
        assert history == []
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    @pytest.mark.parametrize("feedback", ["none", "lstm"])
    def test_deterministic(self, small_splits, feedback):
        cfg = small_config(feedback=feedback)
        reports = []
        for _ in range(2):
            model, _ = train(build_model(cfg, small_splits.dims), small_splits.train, small_splits.val, cfg)
            reports.append(evaluate(model, small_splits.test).as_dict())
        assert reports[0] == reports[1]

    def test_best_checkpoint_restored(self, small_splits):
        cfg = small_config(max_epochs=8, initial_lr=0.05)
        model, history = train(build_model(cfg, small_splits.dims), small_splits.train, small_splits.val, cfg)
        final = evaluate(model, small_splits.val).mae
        assert all(final <= h["val_mae"] + 1e-12 for h in history)
        assert final == pytest.approx(min(h["val_mae"] for h in history), abs=1e-12)

    def test_divergence_keeps_history(self, small_splits, monkeypatch):
        import mmlatch.training as training

        real = training._mae
        calls = []

        def flaky(*args):
            calls.append(1)
            return math.nan if len(calls) == 2 else real(*args)

        monkeypatch.setattr(training, "_mae", flaky)
        cfg = small_config(max_epochs=3)
        with pytest.raises(TrainingDiverged) as info:
            train(build_model(cfg, small_splits.dims), small_splits.train, small_splits.val, cfg)
        assert [h["epoch"] for h in info.value.history] == [1]

    def test_non_finite_parameters_abort(self, small_splits):
        cfg = small_config(max_epochs=3)
        model = build_model(cfg, small_splits.dims)
        model.head.out.bias.data[:] = np.inf
        with pytest.raises(TrainingDiverged):
            train(model, small_splits.train, small_splits.val, cfg)

    def test_history_csv(self):
        text = history_csv([{"epoch": 1, "train_mae": 0.5, "val_mae": 0.25, "lr": 0.001}])
        assert text == "epoch,train_mae,val_mae,lr\n1,0.5,0.25,0.001\n"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_halve_patience=0)
        with pytest.raises(ValueError):
            TrainConfig(dropout=1.0)

    def test_protocol_defaults(self):
        cfg = TrainConfig()
        assert (cfg.initial_lr, cfg.lr_halve_patience, cfg.early_stop_patience, cfg.dropout, cfg.hidden) == (
            5e-4, 2, 10, 0.2, 100)


def report(mae, acc=0.5):
    return MetricsReport(acc, acc, acc, acc, mae, 0.5)


class TestExperiment:
    def test_mean_and_sample_std(self):
        s = summarize([SeedRun(0, report(0.5), []), SeedRun(1, report(0.7), [])])
        assert s.mean["mae"] == pytest.approx(0.6)
        assert s.std["mae"] == pytest.approx(0.1414, abs=1e-4)
        assert s.best_seed == 0 and not s.std_undefined

    def test_single_seed_std_flagged(self):
        s = summarize([SeedRun(0, report(0.5), [])])
        assert s.std["mae"] == 0.0 and s.std_undefined
        assert "undefined" in s.table()

    def test_failed_seeds_reported(self):
        s = summarize([SeedRun(0, None, [], error="boom"), SeedRun(1, report(0.3), [])])
        assert s.best_seed == 1 and "failed seeds: [0]" in s.table()

    def test_table_lists_every_metric(self):
        table = summarize([SeedRun(0, report(0.5), []), SeedRun(1, report(0.7), [])]).table()
        header = table.splitlines()[0]
        assert all(m in header for m in METRIC_NAMES)
        assert "average" in table and "best" in table and "±" in table

    def test_run_experiment(self, small_splits):
        s = run_experiment(small_config(max_epochs=1), 2, small_splits)
        assert [r.seed for r in s.runs] == [0, 1]
        assert s.runs[0].report != s.runs[1].report
        with pytest.raises(ValueError):
            run_experiment(small_config(), 0, small_splits)
