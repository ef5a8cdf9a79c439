import math

import numpy as np
import pytest

from mplstm.data import Dataset, ModSumSpec, gen_modsum
from mplstm.mathcore import Rng
from mplstm.network import Network, NetworkConfig
from mplstm.training import (
    GradcheckRow, OptimizerState, TrainConfig, check_network, evaluate, fit, gradcheck,
    relative_error, rmsprop_step, train_epoch,
)


def small_net(seed=0, **kw):
    base = dict(num_perspectives=2, input_dim=3, num_classes=3, hidden_dim=4, dropout_rate=0.0)
    base.update(kw)
    return Network.init(NetworkConfig(**base), Rng(seed))


def random_batch(seed, B=4, m=2, n=3, d=3, k=3):
    rng = Rng(seed)
    return rng.normal((B, m, n, d)), rng.integers(k, B)


def params_copy(net):
    return {k: v.copy() for k, v in net.parameters().items()}


class TestRmsprop:
    def test_zero_gradient(self):
        theta = {"w": np.array([1.0, -2.0])}
        state = OptimizerState(v={"w": np.array([4.0, 1.0])})
        rmsprop_step(state, theta, {"w": np.zeros(2)})
        np.testing.assert_array_equal(theta["w"], [1.0, -2.0])
        np.testing.assert_allclose(state.v["w"], [3.6, 0.9])

    def test_zero_learning_rate(self):
        theta = {"w": np.array([1.0, -2.0])}
        rmsprop_step(OptimizerState(lr=0.0), theta, {"w": np.array([3.0, 1.0])})
        np.testing.assert_array_equal(theta["w"], [1.0, -2.0])

    def test_scalar_hand_value(self):
        theta = {"w": np.array([1.0])}
        state = OptimizerState(lr=0.1, rho=0.9, eps=1e-8)
        rmsprop_step(state, theta, {"w": np.array([2.0])})
        # v = 0.1 * 4; theta = 1 - 0.1 * 2 / (sqrt(0.4) + 1e-8)
        assert state.v["w"][0] == pytest.approx(0.4, abs=1e-15)
        assert theta["w"][0] == pytest.approx(1 - 0.2 / (math.sqrt(0.4) + 1e-8), abs=1e-15)
        assert theta["w"][0] == pytest.approx(0.68377, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmsprop_step(OptimizerState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


class TestBackward:
    def test_zero_at_certain_prediction(self):
        net = small_net()
        net.head.b_out[:] = [1000.0, 0.0, 0.0]
        X, _ = random_batch(1)
        grads = net.backward(net.forward(X), np.zeros(4, dtype=int))
        for g in grads.values():
            assert np.max(np.abs(g)) < 1e-300

    def test_logit_gradient_is_probs_minus_onehot(self):
        cfg = NetworkConfig(num_perspectives=2, input_dim=3, num_classes=4, hidden_dim=3, dropout_rate=0.0)
        net = Network.zeros(cfg)
        X, _ = random_batch(2, B=1)
        grads = net.backward(net.forward(X), np.array([0]))
        np.testing.assert_allclose(grads["head.b_out"], [-0.75, 0.25, 0.25, 0.25], atol=1e-15)

    @pytest.mark.parametrize("cell", ["mp", "ablation_a", "ablation_b", "ablation_c"])
    @pytest.mark.parametrize("bi", [False, True])
    def test_matches_finite_differences(self, cell, bi):
        net = small_net(seed=3, cell_kind=cell, bidirectional=bi, num_perspectives=3, hidden_dim=3)
        X, y = random_batch(4, m=3, n=4)
        errors = check_network(net, X, y)
        assert max(errors.values()) < 1e-4, errors

    @pytest.mark.parametrize("mode", ["feature_dim", "feature_time"])
    def test_fusion_baselines_match_finite_differences(self, mode):
        net = small_net(seed=5, cell_kind="vanilla", fusion_mode=mode, attention=False)
        X, y = random_batch(6)
        assert max(check_network(net, X, y).values()) < 1e-4

    def test_batch_gradient_is_mean_of_sample_gradients(self):
        net = small_net(seed=7, cell_kind="ablation_b")
        X, y = random_batch(8, B=5)
        batch = net.backward(net.forward(X), y)
        singles = [net.backward(net.forward(X[b:b + 1]), y[b:b + 1]) for b in range(5)]
        for name, g in batch.items():
            np.testing.assert_allclose(g, np.mean([s[name] for s in singles], axis=0), rtol=0, atol=1e-10)

    def test_dropout_gradient_matches_finite_differences(self):
        net = small_net(seed=9, dropout_rate=0.3)
        X, y = random_batch(10)
        mask_rng_seed = 11
        trace = net.forward(X, Rng(mask_rng_seed))
        grads = net.backward(trace, y)
        theta = net.parameters()["fwd.w_s"]
        h = 1e-5
        for j in (0, 5, 17):
            flat = theta.reshape(-1)
            old = flat[j]
            flat[j] = old + h
            up = net.loss(X, y, Rng(mask_rng_seed))
            flat[j] = old - h
            down = net.loss(X, y, Rng(mask_rng_seed))
            flat[j] = old
            f = (up - down) / (2 * h)
            assert relative_error(grads["fwd.w_s"].reshape(-1)[j], f) < 1e-4

    def test_label_count_checked(self):
        net = small_net()
        X, y = random_batch(1)
        with pytest.raises(ValueError):
            net.backward(net.forward(X), y[:2])


class TestGradcheck:
    def test_small_grid_passes(self):
        rows = gradcheck(seed=0, grid={"m": (2,), "hidden": (2,), "n": (3,), "bidirectional": (True,)})
        assert rows[0].label.startswith("sanity")
        assert len(rows) == 1 + 4
        assert all(r.passed for r in rows), [(r.label, r.max_error) for r in rows]

    def test_single_perspective_row_equals_vanilla(self):
        X, y = random_batch(12, m=1)
        mp = small_net(seed=13, num_perspectives=1, cell_kind="mp")
        vanilla = small_net(seed=13, num_perspectives=1, cell_kind="vanilla")
        assert check_network(mp, X, y) == check_network(vanilla, X, y)

    def test_row_flags_failure(self):
        assert not GradcheckRow("x", {"a": 2e-4}).passed
        assert GradcheckRow("x", {"a": 5e-5}).passed


@pytest.fixture(scope="module")
def tiny_modsum():
    rng = Rng(21)
    return gen_modsum(ModSumSpec(4, 3, 0.25, 60), rng), gen_modsum(ModSumSpec(4, 3, 0.25, 30), rng)


class TestTrainEpoch:
    def net(self, dropout=0.0):
        return Network.init(NetworkConfig(2, 4, 4, hidden_dim=6, dropout_rate=dropout), Rng(0))

    def test_zero_learning_rate(self, tiny_modsum):
        train, _ = tiny_modsum
        net = self.net()
        before = params_copy(net)
        cfg = TrainConfig(batch_size=8, lr=0.0, dropout_rate=0.0)
        metrics = train_epoch(net, train, cfg, Rng(1))
        for k, v in net.parameters().items():
            assert np.array_equal(v, before[k])
        assert metrics.loss == pytest.approx(evaluate(net, train).loss, abs=1e-12)

    def test_reproducible(self, tiny_modsum):
        train, val = tiny_modsum
        cfg = TrainConfig(batch_size=7, num_epochs=3, seed=5)
        a, b = self.net(0.1), self.net(0.1)
        assert fit(a, train, val, cfg) == fit(b, train, val, cfg)
        for k, v in a.parameters().items():
            assert np.array_equal(v, b.parameters()[k])

    def test_empty_dataset(self):
        empty = Dataset(np.zeros((0, 2, 3, 4)), np.zeros(0, dtype=int), 4)
        with pytest.raises(ValueError):
            train_epoch(self.net(), empty, TrainConfig(), Rng(0))
        with pytest.raises(ValueError):
            evaluate(self.net(), empty)

    def test_one_step_descent(self):
        wins = 0
        for trial in range(100):
            net = small_net(seed=100 + trial)
            X, y = random_batch(200 + trial, B=8)
            before = net.loss(X, y)
            rmsprop_step(OptimizerState(lr=1e-3), net.parameters(), net.backward(net.forward(X), y))
            wins += net.loss(X, y) < before
        assert wins >= 95


class TestEvaluate:
    def test_uniform_model(self):
        net = Network.zeros(NetworkConfig(2, 4, 4, hidden_dim=3))
        data = gen_modsum(ModSumSpec(4, 3, 0.25, 40), Rng(2))
        result = evaluate(net, data)
        assert result.loss == pytest.approx(math.log(4), abs=1e-12)
        assert result.accuracy == pytest.approx(np.mean(data.labels == 0))
        assert result.confusion[:, 1:].sum() == 0
        assert result.confusion.sum() == len(data)

    def test_perfect_model(self):
        class Oracle:
            def predict_proba(self, X):
                return np.eye(3)[X[:, 0, 0, 0].astype(int)]

        labels = np.array([0, 2, 1, 1, 0])
        feats = np.zeros((5, 1, 1, 1))
        feats[:, 0, 0, 0] = labels
        result = evaluate(Oracle(), Dataset(feats, labels, 3))
        assert result.accuracy == 1.0
        np.testing.assert_array_equal(result.confusion, np.diag([2, 2, 1]))
