import numpy as np
import pytest

from gradcheck import check_layer, numeric_grad, rel_error
from timeagg.neuralnet import (
    GRU,
    LSTM,
    Adam,
    Conv1D,
    Dense,
    Dropout,
    ShapeError,
    TimeDistributedDense,
    bce_loss,
    penalty,
)


class TestDense:
    def test_identity_weights(self):
        layer = Dense(3, 3)
        layer.params["W"] = np.eye(3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_param_count(self):
        assert Dense(10, 8).n_params() == 88

    def test_gradient(self):
        rng = np.random.default_rng(1)
        layer = Dense(3, 2, rng)
        layer.params["b"] = rng.normal(size=2)
        assert check_layer(layer, rng.normal(size=(4, 3)), rng) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Dense(3, 2).forward(np.zeros((4, 5)))


class TestTimeDistributedDense:
    def test_matches_dense_per_window(self):
        rng = np.random.default_rng(2)
        tdd = TimeDistributedDense(5, 4, rng)
        dense = Dense(5, 4)
        dense.params = tdd.params
        x = rng.normal(size=(6, 3, 5))
        y = tdd.forward(x)
        for w in range(3):
            np.testing.assert_array_equal(y[:, w], dense.forward(x[:, w]))

    def test_param_count_independent_of_windows(self):
        layer = TimeDistributedDense(10, 8)
        assert layer.n_params() == 88
        assert layer.forward(np.zeros((2, 7, 10))).shape == (2, 7, 8)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        layer = TimeDistributedDense(5, 4, rng)
        assert check_layer(layer, rng.normal(size=(2, 3, 5)), rng) < 1e-6

    def test_rejects_2d(self):
        with pytest.raises(ShapeError):
            TimeDistributedDense(5, 4).forward(np.zeros((2, 5)))


class TestConv1D:
    def test_kernel_one_is_per_step_dense(self):
        rng = np.random.default_rng(4)
        valid = Conv1D(3, 2, 1, "valid", rng)
        causal = Conv1D(3, 2, 1, "causal")
        causal.params = valid.params
        x = rng.normal(size=(4, 3, 3))
        np.testing.assert_array_equal(valid.forward(x), causal.forward(x))
        np.testing.assert_allclose(valid.forward(x), x @ valid.params["K"][0] + valid.params["b"])

    def test_output_lengths(self):
        x = np.zeros((1, 3, 4))
        assert Conv1D(4, 5, 2, "valid").forward(x).shape == (1, 2, 5)
        assert Conv1D(4, 5, 2, "causal").forward(x).shape == (1, 3, 5)

    def test_valid_matches_definition(self):
        rng = np.random.default_rng(5)
        layer = Conv1D(3, 2, 2, "valid", rng)
        x = rng.normal(size=(2, 4, 3))
        K, b = layer.params["K"], layer.params["b"]
        expected = np.stack([x[:, t] @ K[0] + x[:, t + 1] @ K[1] + b for t in range(3)], axis=1)
        np.testing.assert_allclose(layer.forward(x), expected, rtol=1e-12)

    @pytest.mark.parametrize("k", [2, 3])
    def test_causal_never_reads_the_future(self, k):
        rng = np.random.default_rng(6)
        layer = Conv1D(3, 4, k, "causal", rng)
        for _ in range(20):
            x = rng.normal(size=(2, 5, 3))
            t = int(rng.integers(5))
            x2 = x.copy()
            x2[:, t] += rng.normal(size=(2, 3))
            y, y2 = layer.forward(x), layer.forward(x2)
            np.testing.assert_array_equal(y[:, :t], y2[:, :t])

    @pytest.mark.parametrize("padding", ["valid", "causal"])
    def test_gradient(self, padding):
        rng = np.random.default_rng(7)
        layer = Conv1D(4, 3, 2, padding, rng)
        layer.params["b"] = rng.normal(size=3)
        assert check_layer(layer, rng.normal(size=(2, 3, 4)), rng) < 1e-6

    def test_valid_too_short(self):
        with pytest.raises(ShapeError):
            Conv1D(2, 2, 3, "valid").forward(np.zeros((1, 2, 2)))


class TestGRU:
    def test_zero_params_stay_at_zero(self):
        layer = GRU(5, 4)
        for p in layer.params.values():
            p[...] = 0.0
        x = np.random.default_rng(8).normal(size=(3, 3, 5))
        np.testing.assert_array_equal(layer.forward(x), np.zeros((3, 4)))

    def test_param_count(self):
        assert GRU(8, 4).n_params() == 156

    def test_gradient(self):
        rng = np.random.default_rng(9)
        layer = GRU(5, 4, rng)
        layer.params["bias"] = rng.normal(size=12) * 0.5
        assert check_layer(layer, rng.normal(size=(2, 3, 5)), rng) < 1e-5

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(10)
        layer = GRU(3, 2, rng)
        x = rng.normal(size=(1, 3, 3))
        W, U, b = layer.params["kernel"], layer.params["recurrent"], layer.params["bias"]
        sig = lambda a: 1 / (1 + np.exp(-a))
        h = np.zeros(2)
        for t in range(3):
            z = sig(x[0, t] @ W[:, :2] + h @ U[:, :2] + b[:2])
            r = sig(x[0, t] @ W[:, 2:4] + h @ U[:, 2:4] + b[2:4])
            hh = np.tanh(x[0, t] @ W[:, 4:] + (r * h) @ U[:, 4:] + b[4:])
            h = (1 - z) * h + z * hh
        np.testing.assert_allclose(layer.forward(x)[0], h, rtol=1e-12)


class TestLSTM:
    def test_only_forget_bias_gives_zero_state(self):
        layer = LSTM(5, 4)
        layer.params["kernel"][...] = 0.0
        layer.params["recurrent"][...] = 0.0
        assert np.all(layer.params["bias"][4:8] == 1.0)
        x = np.random.default_rng(11).normal(size=(3, 3, 5))
        np.testing.assert_array_equal(layer.forward(x), np.zeros((3, 4)))

    def test_param_count(self):
        assert LSTM(8, 4).n_params() == 208

    def test_gradient(self):
        rng = np.random.default_rng(12)
        layer = LSTM(5, 4, rng)
        assert check_layer(layer, rng.normal(size=(2, 3, 5)), rng) < 1e-5


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(Dropout(0.0).forward(x, train=True, rng=rng), x)
        np.testing.assert_array_equal(Dropout(0.0).forward(x), x)

    @pytest.mark.parametrize("rate", [0.1, 0.5, 0.9])
    def test_eval_is_identity(self, rate):
        x = np.random.default_rng(1).normal(size=(4, 5))
        out = Dropout(rate).forward(x, train=False)
        assert out is x

    def test_train_preserves_mean(self):
        out = Dropout(0.5).forward(np.ones(10**5), train=True, rng=np.random.default_rng(2))
        assert 0.98 <= out.mean() <= 1.02
        assert set(np.unique(out)) == {0.0, 2.0}

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            Dropout(1.0)


class TestLoss:
    def test_exact_labels(self):
        y = np.array([0.0, 1.0, 1.0])
        loss, _ = bce_loss(np.array([-50.0, 50.0, 50.0]), y)
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_half(self):
        loss, grad = bce_loss(np.zeros(4), np.array([0, 1, 0, 1.0]))
        assert loss == pytest.approx(np.log(2), abs=1e-12)
        np.testing.assert_allclose(grad, [0.125, -0.125, 0.125, -0.125])

    def test_gradient(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=8)
        y = (rng.random(8) < 0.5).astype(float)
        _, g = bce_loss(z, y)
        assert rel_error(g, numeric_grad(lambda: bce_loss(z, y)[0], z)) < 1e-6

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            bce_loss(np.zeros(2), np.array([0.0, 2.0]))

    def test_penalty_zero_coefficients(self):
        w = [np.random.default_rng(4).normal(size=(3, 3))]
        value, grads = penalty(w, 0.0, 0.0)
        assert value == 0.0
        assert np.all(grads[0] == 0)

    def test_penalty_gradient(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(4, 3))
        value, grads = penalty([w], 0.01, 0.02)
        assert value == pytest.approx(0.01 * np.abs(w).sum() + 0.02 * (w ** 2).sum())
        assert rel_error(grads[0], numeric_grad(lambda: penalty([w], 0.01, 0.02)[0], w)) < 1e-6


class TestAdam:
    def test_first_step(self):
        theta = np.zeros(1)
        Adam([theta]).step([theta], [np.ones(1)])
        assert abs(theta[0] + 0.001) < 1e-6

    def test_zero_gradient(self):
        theta = np.array([0.3, -2.0])
        opt = Adam([theta])
        for _ in range(5):
            opt.step([theta], [np.zeros(2)])
        np.testing.assert_array_equal(theta, [0.3, -2.0])

    def test_quadratic(self):
        theta = np.ones(1)
        opt = Adam([theta])
        trace = []
        for _ in range(200):
            opt.step([theta], [2 * theta])
            trace.append(abs(theta[0]))
        assert trace[-1] < 0.9
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_defaults(self):
        opt = Adam([np.zeros(1)])
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (0.001, 0.9, 0.999, 1e-7)
