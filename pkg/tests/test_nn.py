import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flad import nn


def zero_model(sizes, head="softmax_logits", act="relu"):
    config = nn.MlpConfig(sizes, act, head)
    return nn.Model(config, np.zeros(config.n_params))


def chained_oracle(model, x):
    """Layer-by-layer recompute from the raw parameter vector."""
    sizes = model.config.layer_sizes
    p, out = model.params, x
    offset = 0
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = p[offset:offset + a * b].reshape(a, b)
        offset += a * b
        bias = p[offset:offset + b]
        offset += b
        out = np.einsum("ij,jk->ik", out, w) + bias
        if i < len(sizes) - 2:
            out = np.maximum(out, 0) if model.config.hidden_activation == "relu" else np.tanh(out)
    return out


class TestConfig:
    def test_param_count(self):
        assert nn.MlpConfig((4, 3, 2)).n_params == 4 * 3 + 3 + 3 * 2 + 2

    @pytest.mark.parametrize("sizes", [(4,), (4, 0, 2)])
    def test_bad_sizes(self, sizes):
        with pytest.raises(ValueError):
            nn.MlpConfig(sizes)

    def test_autoencoder_bottleneck_must_shrink(self):
        enc = zero_model((4, 4), "linear")
        dec = zero_model((4, 4), "linear")
        with pytest.raises(ValueError):
            nn.Autoencoder(enc, dec)
        nn.Autoencoder(enc, dec, allow_square=True)

    def test_init_is_glorot_bounded(self):
        model = nn.init_model(nn.MlpConfig((10, 6, 3)), seed=1)
        for w, b, _ in model.layers():
            assert np.all(np.abs(w) <= np.sqrt(6 / sum(w.shape)))
            assert np.all(b == 0)


class TestForward:
    def test_zero_linear_model_outputs_zero(self, rng):
        out = nn.forward(zero_model((5, 4, 3), "linear"), rng.normal(size=(7, 5)))
        assert np.array_equal(out, np.zeros((7, 3)))

    def test_zero_softmax_model_uniform(self, rng):
        out = nn.forward(zero_model((5, 10)), rng.normal(size=(3, 5)))
        np.testing.assert_allclose(out, 0.1, atol=1e-15)

    @pytest.mark.parametrize("act", ["relu", "tanh"])
    def test_matches_hand_chained_arithmetic(self, rng, act):
        model = nn.init_model(nn.MlpConfig((4, 3, 2), act, "linear"), seed=3)
        x = rng.normal(size=(6, 4))
        np.testing.assert_allclose(nn.forward(model, x), chained_oracle(model, x), atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(nn.ShapeError):
            nn.forward(zero_model((4, 2)), np.zeros((3, 5)))

    @given(st.integers(0, 2**32 - 1))
    def test_softmax_rows_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        p = nn.softmax(r.normal(scale=50, size=(5, 7)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.isfinite(p))


class TestLosses:
    def test_uniform_logits_give_log_k(self):
        assert nn.cross_entropy_loss(np.zeros((4, 10)), [0, 3, 5, 9]) == pytest.approx(math.log(10))

    def test_perfect_logits_tend_to_zero(self):
        logits = np.array([[1e4, 0.0], [0.0, 1e4]])
        assert nn.cross_entropy_loss(logits, [0, 1]) < 1e-12

    def test_cross_entropy_matches_scalar_rows(self, rng):
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        oracle = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y]
                          for row, y in zip(logits, labels)])
        assert nn.cross_entropy_loss(logits, labels) == pytest.approx(oracle, abs=1e-12)

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            nn.cross_entropy_loss(np.zeros((2, 3)), [0, 3])

    def test_mse_examples(self, rng):
        assert nn.mse_loss([[0.0, 0.0]], [[1.0, 1.0]]) == 1.0
        x = rng.normal(size=(3, 4))
        assert nn.mse_loss(x, x) == 0.0
        y = rng.normal(size=(3, 4))
        loop = sum((a - b) ** 2 for ra, rb in zip(x, y) for a, b in zip(ra, rb)) / 12
        assert nn.mse_loss(x, y) == pytest.approx(loop, abs=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(st.integers(0, 2**32 - 1))
    def test_loss_properties(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.normal(size=(4, 3)), r.normal(size=(4, 3))
        assert nn.mse_loss(x, y) >= 0
        assert nn.mse_loss(x, y) == nn.mse_loss(y, x)
        assert nn.cross_entropy_loss(x, r.integers(0, 3, size=4)) >= 0


class TestGradients:
    @pytest.mark.parametrize("sizes,act,head,loss", [
        ((5, 7, 3), "relu", "softmax_logits", "cross_entropy"),
        ((5, 7, 3), "tanh", "softmax_logits", "cross_entropy"),
        ((4, 6, 2), "tanh", "linear", "mse"),
        ((3, 2), "relu", "linear", "mse"),
    ])
    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, sizes, act, head, loss, seed):
        r = np.random.default_rng(seed)
        model = nn.init_model(nn.MlpConfig(sizes, act, head), seed=seed)
        x = r.uniform(size=(5, sizes[0]))
        target = r.integers(0, sizes[-1], size=5) if loss == "cross_entropy" \
            else r.normal(size=(5, sizes[-1]))
        exact = nn.backward(model, x, target, loss)
        approx = nn.finite_diff_gradient(model, x, target, loss)
        assert exact.shape == model.params.shape
        assert nn.l2_norm(exact - approx) / nn.l2_norm(approx) < 1e-4

    def test_autoencoder_gradient(self, rng):
        ae = nn.init_autoencoder(6, hidden=5, bottleneck=2, seed=4)
        x = rng.uniform(size=(4, 6))
        exact = nn.backward(ae, x, x, "mse")
        approx = nn.finite_diff_gradient(ae, x, x, "mse")
        assert nn.l2_norm(exact - approx) / nn.l2_norm(approx) < 1e-4

    def test_linear_mse_closed_form(self):
        model = nn.init_model(nn.MlpConfig((3, 1), output_head="linear"), seed=2)
        x = np.array([[0.5, -1.0, 2.0]])
        y = np.array([[0.3]])
        resid = (nn.forward(model, x) - y)[0, 0]
        expected = np.concatenate([2 * resid * x[0], [2 * resid]])
        np.testing.assert_allclose(nn.backward(model, x, y, "mse"), expected, atol=1e-14)

    def test_stationary_at_exact_fit(self):
        config = nn.MlpConfig((2, 1), output_head="linear")
        model = nn.Model(config, np.array([0.5, -0.25, 0.1]))
        x = np.array([[1.0, 2.0]])
        y = nn.forward(model, x)
        assert nn.l2_norm(nn.backward(model, x, y, "mse")) < 1e-8

    def test_central_difference_quadratic(self):
        g = nn.central_difference(lambda w: float(w[0] ** 2), np.array([3.0]), eps=1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_eps_range(self):
        with pytest.raises(ValueError):
            nn.central_difference(lambda w: 0.0, np.zeros(1), eps=1e-2)

    def test_zero_model_zero_batch_mse(self):
        model = zero_model((3, 2), "linear")
        x = np.zeros((4, 3))
        assert np.all(nn.finite_diff_gradient(model, x, np.zeros((4, 2)), "mse") == 0)

    def test_mse_needs_linear_head(self):
        with pytest.raises(ValueError):
            nn.backward(zero_model((3, 2)), np.zeros((1, 3)), np.zeros((1, 2)), "mse")

    def test_l2_norm(self, rng):
        assert nn.l2_norm([3.0, 4.0]) == 5.0
        assert nn.l2_norm(np.zeros(5)) == 0.0
        v = rng.normal(size=50)
        assert nn.l2_norm(v) == pytest.approx(math.sqrt(sum(a * a for a in v)), abs=1e-12)


class TestOptimizer:
    def test_sgd_zero_grad(self):
        state = nn.OptimizerState("sgd")
        assert np.array_equal(nn.optimizer_step(state, np.array([1.0, 2.0]), np.zeros(2), 0.1),
                              [1.0, 2.0])

    def test_sgd_arithmetic(self):
        out = nn.optimizer_step(nn.OptimizerState("sgd"), np.array([1.0]), np.array([2.0]), 0.5)
        assert out[0] == 0.0

    def test_adam_first_step(self):
        state = nn.OptimizerState("adam")
        out = nn.optimizer_step(state, np.array([0.0]), np.array([1.0]), 0.001)
        # at t=1 the bias-corrected moments are g and g**2
        assert -out[0] == pytest.approx(0.001 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1

    @given(st.integers(1, 20))
    def test_adam_zero_grad_never_moves(self, steps):
        state = nn.OptimizerState("adam")
        p = np.array([0.3, -1.0])
        for _ in range(steps):
            p2 = nn.optimizer_step(state, p, np.zeros(2), 0.01)
            assert np.array_equal(p2, p)
        assert state.t == steps

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            nn.optimizer_step(nn.OptimizerState("sgd"), np.zeros(2), np.zeros(3), 0.1)


class TestTraining:
    def setup_method(self):
        r = np.random.default_rng(0)
        self.x = r.uniform(size=(30, 4))
        self.y = (self.x[:, 0] > 0.5).astype(int)
        self.model = nn.init_model(nn.MlpConfig((4, 5, 2)), seed=0)

    def test_epochs_zero_unchanged(self):
        out = nn.train_local(self.model, self.x, self.y, epochs=0, seed=1)
        assert np.array_equal(out.params, self.model.params)

    def test_lr_zero_unchanged(self):
        out = nn.train_local(self.model, self.x, self.y, lr=0.0, epochs=3, seed=1,
                             optimizer="sgd")
        assert np.array_equal(out.params, self.model.params)

    def test_input_untouched_and_deterministic(self):
        before = self.model.params.copy()
        a = nn.train_local(self.model, self.x, self.y, bs=7, epochs=3, seed=9)
        b = nn.train_local(self.model, self.x, self.y, bs=7, epochs=3, seed=9)
        assert np.array_equal(self.model.params, before)
        assert np.array_equal(a.params, b.params)
        assert not np.array_equal(a.params, before)

    def test_empty_data(self):
        with pytest.raises(nn.EmptyDataError):
            nn.train_local(self.model, np.zeros((0, 4)), np.zeros(0, int))

    def test_convex_single_point_fit(self):
        model = nn.init_model(nn.MlpConfig((3, 2), output_head="linear"), seed=0)
        x, y = np.array([[0.2, 0.7, 0.1]]), np.array([[1.0, -0.5]])
        fit = nn.train_local(model, x, y, lr=0.5, epochs=500, seed=0, loss="mse",
                             optimizer="sgd")
        assert nn.loss_value(fit, x, y, "mse") < 1e-6


class TestAutoencoder:
    def test_identity_square_ae(self, rng):
        d = 4
        eye = nn.MlpConfig((d, d), output_head="linear")
        params = np.concatenate([np.eye(d).ravel(), np.zeros(d)])
        ae = nn.Autoencoder(nn.Model(eye, params), nn.Model(eye, params.copy()),
                            allow_square=True)
        x = rng.uniform(size=(5, d))
        np.testing.assert_allclose(nn.reconstruct(ae, x), x, atol=1e-15)

    def test_zero_ae_outputs_zero(self, rng):
        ae = nn.init_autoencoder(6, hidden=4, bottleneck=2, seed=0)
        ae = ae.with_params(np.zeros_like(ae.params))
        assert np.array_equal(nn.reconstruct(ae, rng.uniform(size=(3, 6))), np.zeros((3, 6)))

    def test_training_reduces_error(self, rng):
        x = rng.uniform(size=(64, 8))
        ae = nn.init_autoencoder(8, hidden=16, bottleneck=4, seed=0)
        trained = nn.train_local(ae, x, x, lr=0.01, bs=16, epochs=50, seed=1, loss="mse")
        assert nn.mse_loss(x, nn.reconstruct(trained, x)) < nn.mse_loss(x, nn.reconstruct(ae, x))
