"""Unit tests for predictive models, losses, training, and DQ metrics."""

import numpy as np
import pytest

from rmab_dfl import (
    Cohort,
    DatasetSplits,
    LossSpec,
    ModelSpec,
    PredictiveModel,
    TrainingConfig,
    evaluate_dq,
    mse_loss,
    nll_loss,
    predict,
    sim_dfl_loss,
    train,
    uniform_setup,
)
from rmab_dfl.datasets import trajectory_data
from rmab_dfl.learning import (
    Adam,
    dec_dfl_cohort_loss,
    grid_search,
    run_epoch,
    whittle_index_gradient,
)
from rmab_dfl.mdp import ENGAGEMENT, RewardSpec, TransitionTensor, whittle_index
from rmab_dfl.dec_layer import RegularizerConfig


def _cohort(rng, n=3, states=2, gamma=0.9, feature_dim=4, budget=None):
    tensors = rng.dirichlet(np.ones(states), size=(n, states, 2))
    features = rng.normal(size=(n, feature_dim))
    if budget is None:
        budget = 0.5 * n * (1 - gamma)
    return Cohort(
        features=features, tensors=tensors, budget=budget, setup=uniform_setup(states, gamma)
    )


class TestPredictiveModel:
    def test_predictions_are_stochastic_tensors(self):
        rng = np.random.default_rng(0)
        model = PredictiveModel(ModelSpec(kind="mlp", layers=2, hidden_dim=8), 4, 2, seed=0)
        tensors = predict(model, rng.normal(size=(5, 4)))
        assert len(tensors) == 5
        for t in tensors:
            assert np.allclose(t.probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_feature_dim_checked(self):
        model = PredictiveModel(ModelSpec(kind="linear"), 4, 2, seed=0)
        with pytest.raises(ValueError):
            model.forward(np.zeros((3, 5)))

    def test_theta_round_trip(self):
        model = PredictiveModel(ModelSpec(kind="mlp", layers=2, hidden_dim=8), 4, 2, seed=0)
        theta = model.get_theta()
        model.set_theta(theta * 2.0)
        assert np.allclose(model.get_theta(), theta * 2.0)
        with pytest.raises(ValueError):
            model.set_theta(theta[:-1])

    def test_backprop_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        model = PredictiveModel(ModelSpec(kind="linear"), 3, 2, seed=0)
        # move away from the tiny default init so ReLU/softmax are generic
        model.set_theta(rng.normal(scale=0.3, size=model.get_theta().shape))
        x = rng.normal(size=(4, 3))
        target = rng.dirichlet(np.ones(2), size=(4, 2, 2))

        def loss_of(theta):
            model.set_theta(theta)
            tensors, _ = model.forward(x)
            return 0.5 * float(np.sum((tensors - target) ** 2))

        theta0 = model.get_theta()
        model.set_theta(theta0)
        tensors, cache = model.forward(x)
        gw, gb = model.backward(cache, tensors - target)
        analytic = np.concatenate([g.ravel() for g in gw] + [g.ravel() for g in gb])
        h = 1e-6
        for idx in rng.choice(theta0.size, size=10, replace=False):
            e = np.zeros_like(theta0)
            e[idx] = h
            fd = (loss_of(theta0 + e) - loss_of(theta0 - e)) / (2 * h)
            assert abs(analytic[idx] - fd) <= 1e-5 * max(1.0, abs(fd))
        model.set_theta(theta0)


class TestAccuracyLosses:
    def test_mse_value_and_gradient(self):
        rng = np.random.default_rng(2)
        pred = rng.dirichlet(np.ones(2), size=(3, 2, 2))
        truth = rng.dirichlet(np.ones(2), size=(3, 2, 2))
        value, grad = mse_loss(pred, truth)
        assert value == pytest.approx(float(np.mean((pred - truth) ** 2)))
        h = 1e-7
        e = np.zeros_like(pred)
        e[1, 0, 1, 0] = h
        fd = (mse_loss(pred + e, truth)[0] - mse_loss(pred - e, truth)[0]) / (2 * h)
        assert grad[1, 0, 1, 0] == pytest.approx(fd, rel=1e-5)

    def test_nll_value_and_gradient(self):
        rng = np.random.default_rng(3)
        pred = rng.dirichlet(np.ones(2), size=(2, 2, 2))
        trajs = trajectory_data([np.array([0, 1, 1, 0, 0]), np.array([1, 0, 0, 1, 1])], 2)
        value, grad = nll_loss(pred, trajs)
        expected = -float(np.sum(trajs.counts * np.log(pred)))
        assert value == pytest.approx(expected)
        h = 1e-7
        e = np.zeros_like(pred)
        e[0, 0, 1, 1] = h
        fd = (nll_loss(pred + e, trajs)[0] - nll_loss(pred - e, trajs)[0]) / (2 * h)
        assert grad[0, 0, 1, 1] == pytest.approx(fd, rel=1e-4)


class TestWhittleGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        setup = uniform_setup(2, 0.9)
        reward = RewardSpec(ENGAGEMENT)
        h = 1e-6
        for _ in range(5):
            T = rng.dirichlet(np.ones(2), size=(2, 2))
            table = whittle_index(TransitionTensor(T), reward, setup, tol=1e-10)
            grad = whittle_index_gradient(T, table.wi, reward, setup)
            for s in range(2):
                d = np.zeros_like(T)
                sa, aa = int(rng.integers(2)), int(rng.integers(2))
                d[sa, aa, 0], d[sa, aa, 1] = 1.0, -1.0
                if min(T[sa, aa, 0], T[sa, aa, 1]) < 10 * h:
                    continue
                up = whittle_index(TransitionTensor(T + h * d), reward, setup, tol=1e-10)
                dn = whittle_index(TransitionTensor(T - h * d), reward, setup, tol=1e-10)
                fd = (up.wi[s] - dn.wi[s]) / (2 * h)
                an = float(np.sum(grad[s] * d))
                assert abs(an - fd) <= 1e-3 * max(1.0, abs(fd))


class TestSimDfl:
    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        cohort = _cohort(rng, budget=1.0)
        pred = rng.dirichlet(np.ones(2), size=(3, 2, 2))
        a = sim_dfl_loss(pred, cohort, trajectories=20, seed=11)
        b = sim_dfl_loss(pred, cohort, trajectories=20, seed=11)
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])

    def test_saturated_budget_has_zero_gradient(self):
        # with budget >= N every arm is always pulled: the selection never
        # depends on the indices, so the estimator must return exactly zero
        rng = np.random.default_rng(6)
        cohort = _cohort(rng, n=2, budget=2.0)
        pred = rng.dirichlet(np.ones(2), size=(2, 2, 2))
        _, grad = sim_dfl_loss(pred, cohort, trajectories=10, seed=0)
        assert np.all(grad == 0.0)


class TestTraining:
    def _splits(self, rng, loss_name):
        cohorts = [_cohort(rng) for _ in range(3)]
        splits = DatasetSplits(train=cohorts[:1], val=cohorts[1:2], test=cohorts[2:])
        if loss_name == "nll":
            trajs = []
            for c in splits.train + splits.val:
                seqs = []
                for i in range(c.num_arms):
                    seq = [int(rng.integers(2))]
                    for _ in range(10):
                        a = int(rng.integers(2))
                        nxt = int(rng.choice(2, p=c.tensors[i, seq[-1], a]))
                        seq += [a, nxt]
                    seqs.append(np.array(seq))
                trajs.append(trajectory_data(seqs, 2))
            splits.train_trajectories = trajs[:1]
            splits.val_trajectories = trajs[1:]
        return splits

    def test_mse_training_reduces_loss(self):
        rng = np.random.default_rng(7)
        data = self._splits(rng, "mse")
        config = TrainingConfig(loss=LossSpec(name="mse"), learning_rate=1e-2, epochs=20, seed=0)
        model, log = train(config, data)
        train_values = [r["value"] for r in log if r["split"] == "train"]
        assert train_values[-1] < train_values[0]

    def test_decision_loss_training_increases_return(self):
        rng = np.random.default_rng(8)
        data = self._splits(rng, "fast-dec-dfl")
        config = TrainingConfig(
            loss=LossSpec(name="fast-dec-dfl", alpha=1.0),
            learning_rate=1e-2,
            epochs=15,
            seed=0,
        )
        model, log = train(config, data)
        train_values = [r["value"] for r in log if r["split"] == "train"]
        assert train_values[-1] >= train_values[0] - 1e-9

    def test_best_validation_parameters_restored(self):
        rng = np.random.default_rng(9)
        data = self._splits(rng, "mse")
        config = TrainingConfig(loss=LossSpec(name="mse"), learning_rate=1e-2, epochs=10, seed=0)
        model, log = train(config, data)
        best_val = min(r["value"] for r in log if r["split"] == "val")
        final_val = run_epoch(model, None, data.val, None, config.loss, 0)
        assert final_val == pytest.approx(best_val, abs=1e-12)

    def test_grid_search_picks_best_validation(self):
        rng = np.random.default_rng(10)
        data = self._splits(rng, "mse")
        base = TrainingConfig(loss=LossSpec(name="mse"), epochs=5, seed=0)
        model, config, logs = grid_search(base, [1e-2, 1e-5], data)
        assert config.learning_rate in (1e-2, 1e-5)
        assert any(rec["lr"] == 1e-5 for rec in logs)

    def test_nll_requires_trajectories(self):
        rng = np.random.default_rng(11)
        cohorts = [_cohort(rng)]
        spec = LossSpec(name="nll")
        model = PredictiveModel(ModelSpec(kind="linear"), 4, 2, seed=0)
        with pytest.raises(ValueError):
            run_epoch(model, Adam(1e-3), cohorts, None, spec, 0)

    def test_unknown_loss_rejected(self):
        with pytest.raises(ValueError):
            LossSpec(name="huber")


class TestDecisionQuality:
    def test_anchors(self):
        rng = np.random.default_rng(12)
        cohort = _cohort(rng, n=4)
        report = evaluate_dq(None, [cohort], trajectories=0, predictions=[cohort.tensors])
        assert report.normalized_decomposed_dq == pytest.approx(1.0, abs=1e-12)
        assert report.never_act_dq <= report.perfect_decomposed_dq

    def test_trajectories_zero_skips_joint(self):
        rng = np.random.default_rng(13)
        cohort = _cohort(rng, n=2)
        report = evaluate_dq(None, [cohort], trajectories=0, predictions=[cohort.tensors])
        assert np.isnan(report.joint_dq)

    def test_model_or_predictions_required(self):
        rng = np.random.default_rng(14)
        cohort = _cohort(rng, n=2)
        with pytest.raises(ValueError):
            evaluate_dq(None, [cohort], trajectories=0)

    def test_dec_cohort_loss_gradient_shape(self):
        rng = np.random.default_rng(15)
        cohort = _cohort(rng, n=3)
        pred = rng.dirichlet(np.ones(2), size=(3, 2, 2))
        value, grad = dec_dfl_cohort_loss(pred, cohort, RegularizerConfig(alpha=1.0))
        assert np.isfinite(value)
        assert grad.shape == pred.shape
