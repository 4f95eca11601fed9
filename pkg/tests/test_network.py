from pathlib import Path

import numpy as np
import pytest

import sys
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from modules.network import (
    SGD, Adam, Network, NetworkSpec, NonFiniteError, ReLU, autoencoder_spec, make_optimizer,
    qnet_spec, tabular_spec, tiny_spec,
)

FD_STEP = 1e-5


def relu_masks(net: Network, x: np.ndarray, flat: np.ndarray, training: bool = False):
    _, caches = net._run(net._prepare(x), flat, training=training)
    return [cache for layer, cache in zip(net.layers, caches) if isinstance(layer, ReLU)]


def check_gradient(net: Network, x: np.ndarray, loss_fn, analytic: np.ndarray,
                   indices: np.ndarray) -> int:
    """Central differences at the given parameter indices; returns how many were compared.

    Indices whose perturbation flips a ReLU are skipped.
    """
    base = net.theta.copy()
    compared = 0
    for i in indices:
        plus, minus = base.copy(), base.copy()
        plus[i] += FD_STEP
        minus[i] -= FD_STEP
        if not all(np.array_equal(a, b) for a, b in zip(relu_masks(net, x, plus), relu_masks(net, x, minus))):
            continue
        net.theta[...] = plus
        loss_plus = loss_fn()
        net.theta[...] = minus
        loss_minus = loss_fn()
        net.theta[...] = base
        numeric = (loss_plus - loss_minus) / (2 * FD_STEP)
        scale = max(abs(numeric), abs(analytic[i]), 1e-6)
        assert abs(numeric - analytic[i]) / scale < 1e-4, f"parameter {i}"
        compared += 1
    return compared


def sample_indices(net: Network, per_block: int, rng: np.random.Generator) -> np.ndarray:
    picks = []
    for entries in net._slices:
        for start, stop, _ in entries:
            picks.extend(rng.choice(np.arange(start, stop), size=min(per_block, stop - start), replace=False))
    return np.array(picks)


class TestForward:
    """Forward passes and their shapes."""

    def test_output_shape(self):
        net = Network(qnet_spec((10, 10), conv_channels=(4, 8), dense=32), seed=0)
        assert net.output_shape == (5,)
        assert net.q_values(np.zeros((10, 10))).shape == (1, 5)
        assert net.q_values(np.zeros((3, 10, 10))).shape == (3, 5)

    def test_shape_mismatch(self):
        net = Network(tiny_spec((10, 10)), seed=0)
        with pytest.raises(ValueError):
            net.forward(np.zeros((16, 16)))

    def test_zero_weights_give_zero_output(self):
        net = Network(qnet_spec((8, 8), conv_channels=(4, 8), dense=16), seed=0)
        net.theta[:] = 0.0
        x = np.random.default_rng(0).random((2, 8, 8))
        assert np.all(net.forward(x) == 0.0)

    def test_seeded_initialization(self):
        spec = qnet_spec((8, 8), conv_channels=(4, 8), dense=16)
        a, b = Network(spec, seed=3), Network(spec, seed=3)
        x = np.random.default_rng(1).random((4, 8, 8))
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.forward(x), b.forward(x))
        assert not np.array_equal(a.theta, Network(spec, seed=4).theta)

    def test_dense_layers_match_manual_evaluation(self):
        net = Network(tiny_spec((6, 6), hidden=7), seed=2)
        x = np.random.default_rng(2).random((3, 6, 6))
        (w1, b1), (w2, b2) = net.views(net.theta)[1], net.views(net.theta)[3]
        hidden = np.maximum(x.reshape(3, -1) @ w1 + b1, 0.0)
        assert np.allclose(net.forward(x), hidden @ w2 + b2, rtol=0, atol=1e-10)

    def test_convolution_matches_naive_loop(self):
        net = Network(qnet_spec((5, 6), conv_channels=(3,), dense=4), seed=5)
        x = np.random.default_rng(5).random((2, 5, 6))
        weight, bias = net.views(net.theta)[0]
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 3, 5, 6))
        for n in range(2):
            for c in range(3):
                for i in range(5):
                    for j in range(6):
                        expected[n, c, i, j] = np.sum(padded[n, i:i + 3, j:j + 3] * weight[c, 0]) + bias[c]
        out, _ = net._run(net._prepare(x), net.theta, upto=0)
        assert np.allclose(out, expected, rtol=0, atol=1e-10)

    def test_non_finite_weights(self):
        net = Network(tiny_spec((4, 4), hidden=3), seed=0)
        net.theta[0] = np.inf
        with pytest.raises(NonFiniteError) as excinfo:
            net.forward(np.ones((4, 4)))
        assert excinfo.value.layer == 1

    def test_target_only_changes_on_sync(self):
        net = Network(tiny_spec((4, 4), hidden=3), seed=0)
        x = np.random.default_rng(0).random((2, 4, 4))
        before = net.forward(x, target=True)
        net.theta += 0.1
        assert np.array_equal(net.forward(x, target=True), before)
        assert not np.array_equal(net.forward(x), before)
        net.sync_target()
        assert np.array_equal(net.forward(x, target=True), net.forward(x))


class TestMaskedLoss:
    """Weighted TD loss and its gradient."""

    def setup_method(self):
        self.net = Network(tiny_spec((4, 4), hidden=6), seed=1)
        self.x = np.random.default_rng(1).random((3, 4, 4))
        self.actions = np.array([0, 3, 4])

    def test_all_masked(self):
        result = self.net.masked_loss_and_grad(self.x, self.actions, np.zeros(3), np.zeros(3))
        assert result.empty
        assert result.loss == 0.0
        assert not np.any(result.grad)

    def test_single_sample(self):
        q = self.net.q_values(self.x[:1])[0, 2]
        result = self.net.masked_loss_and_grad(self.x[:1], [2], [q + 1.0], [1.0])
        assert result.loss == pytest.approx(1.0, abs=1e-12)
        assert result.included == 1

    def test_weight_scales_loss(self):
        targets = np.array([1.0, -1.0, 0.5])
        full = self.net.masked_loss_and_grad(self.x, self.actions, targets, np.ones(3))
        scaled = self.net.masked_loss_and_grad(self.x, self.actions, targets, np.full(3, 0.3))
        assert scaled.loss == pytest.approx(0.3 * full.loss, rel=1e-12)
        assert np.allclose(scaled.grad, 0.3 * full.grad, rtol=1e-12, atol=0)
        assert full.loss >= 0

    def test_mean_over_included_samples(self):
        targets = np.array([1.0, -1.0, 0.5])
        q = self.net.q_values(self.x)[np.arange(3), self.actions]
        result = self.net.masked_loss_and_grad(self.x, self.actions, targets, [1.0, 0.0, 1.0])
        expected = ((targets[0] - q[0]) ** 2 + (targets[2] - q[2]) ** 2) / 2
        assert result.loss == pytest.approx(expected, rel=1e-12)

    def test_callable_weights_see_errors(self):
        targets = np.array([1.0, -1.0, 0.5])
        seen = []

        def weights(delta):
            seen.append(delta.copy())
            return (delta > 0).astype(float)

        self.net.masked_loss_and_grad(self.x, self.actions, targets, weights)
        q = self.net.q_values(self.x)[np.arange(3), self.actions]
        assert np.allclose(seen[0], targets - q)

    def test_weights_out_of_range(self):
        with pytest.raises(ValueError):
            self.net.masked_loss_and_grad(self.x, self.actions, np.zeros(3), [1.5, 0.0, 0.0])

    def test_qnet_gradient(self):
        net = Network(qnet_spec((8, 8), conv_channels=(2, 3), dense=12), seed=7)
        rng = np.random.default_rng(7)
        x = rng.random((3, 8, 8))
        actions, targets, weights = [1, 4, 0], rng.standard_normal(3), np.array([1.0, 0.5, 0.25])
        analytic = net.masked_loss_and_grad(x, actions, targets, weights).grad
        compared = check_gradient(
            net, x, lambda: net.masked_loss_and_grad(x, actions, targets, weights).loss,
            analytic, sample_indices(net, 6, rng))
        assert compared >= 30

    def test_full_layout_qnet_gradient(self):
        net = Network(qnet_spec((16, 16), conv_channels=(4, 8), dense=32), seed=11)
        rng = np.random.default_rng(11)
        x = rng.random((2, 16, 16))
        actions, targets, weights = [2, 3], rng.standard_normal(2), np.array([1.0, 0.7])
        analytic = net.masked_loss_and_grad(x, actions, targets, weights).grad
        compared = check_gradient(
            net, x, lambda: net.masked_loss_and_grad(x, actions, targets, weights).loss,
            analytic, sample_indices(net, 6, rng))
        assert compared >= 30

    def test_tabular_gradient_is_exact(self):
        net = Network(tabular_spec(3, 2), seed=0)
        net.theta[:] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
        x = np.eye(3)[[1]]
        result = net.masked_loss_and_grad(x, [1], [1.0], [0.5])
        delta = 1.0 - 0.4
        expected = np.zeros(6)
        expected[3] = -2.0 * 0.5 * delta
        assert np.allclose(result.grad, expected, rtol=0, atol=1e-15)


class TestAutoencoder:
    """Reconstruction loss of the hashing autoencoder."""

    def test_shape_requirements(self):
        with pytest.raises(ValueError):
            autoencoder_spec((10, 10))

    def test_reconstruction_shape_and_embedding(self):
        net = Network(autoencoder_spec((8, 8), conv_channels=(2, 4), dense=16, code_size=8), seed=0)
        x = np.random.default_rng(0).random((2, 8, 8))
        assert net.forward(x).shape == (2, 1, 8, 8)
        code = net.embed(x)
        assert code.shape == (2, 8)
        assert np.all((code > 0) & (code < 1))

    def test_gradient(self):
        net = Network(autoencoder_spec((8, 8), conv_channels=(2, 3), dense=10, code_size=6, noise=0.3), seed=3)
        rng = np.random.default_rng(3)
        x = rng.random((2, 8, 8))
        analytic = net.reconstruction_loss_and_grad(x, training=False).grad
        compared = check_gradient(
            net, x, lambda: net.reconstruction_loss_and_grad(x, training=False).loss,
            analytic, sample_indices(net, 4, rng))
        assert compared >= 30

    def test_full_layout_gradient(self):
        """Both strided convolutions and both transposed convolutions on a 16x16 input."""
        net = Network(autoencoder_spec((16, 16), conv_channels=(4, 8), dense=32, code_size=16, noise=0.3), seed=5)
        rng = np.random.default_rng(5)
        x = rng.random((2, 16, 16))
        analytic = net.reconstruction_loss_and_grad(x, training=False).grad
        compared = check_gradient(
            net, x, lambda: net.reconstruction_loss_and_grad(x, training=False).loss,
            analytic, sample_indices(net, 4, rng))
        assert compared >= 40

    def test_sigmoid_saturates_without_overflow(self):
        net = Network(autoencoder_spec((8, 8), conv_channels=(2, 4), dense=16, code_size=8), seed=0)
        sigmoid = net.layers[net.spec.embedding_layer]
        with np.errstate(over="raise"):
            y, _ = sigmoid.forward(np.array([[-1000.0, -30.0, 0.0, 30.0, 1000.0]]), [])
        assert y[0, 0] == 0.0
        assert y[0, 2] == 0.5
        assert y[0, -1] == 1.0
        assert np.all(np.diff(y[0]) >= 0)

    def test_training_noise_only_while_training(self):
        net = Network(autoencoder_spec((8, 8), conv_channels=(2, 4), dense=16, code_size=8, noise=0.3), seed=0)
        x = np.random.default_rng(0).random((1, 8, 8))
        clean = net.reconstruction_loss_and_grad(x, training=False).loss
        assert net.reconstruction_loss_and_grad(x, training=False).loss == clean
        assert net.reconstruction_loss_and_grad(x, training=True).loss != clean


class TestOptimizers:
    """Adam and plain SGD."""

    def test_zero_gradient_leaves_parameters(self):
        theta = np.array([0.5, -0.25])
        Adam(2, lr=1e-3).step(theta, np.zeros(2))
        assert np.array_equal(theta, [0.5, -0.25])

    def test_first_step_is_learning_rate_times_sign(self):
        theta = np.zeros(3)
        Adam(3, lr=1e-3).step(theta, np.array([0.5, -2.0, 1e-3]))
        assert np.allclose(theta, [-1e-3, 1e-3, -1e-3], rtol=1e-4, atol=0)

    def test_two_steps_match_closed_form(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
        theta = np.array([1.0])
        adam = Adam(1, lr=lr)
        m = v = 0.0
        expected = 1.0
        for t, g in enumerate([0.2, -0.1], start=1):
            adam.step(theta, np.array([g]))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g ** 2
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            expected -= lr * m_hat / (np.sqrt(v_hat) + eps)
        assert theta[0] == pytest.approx(expected, rel=1e-14)
        assert adam.t == 2

    def test_non_finite_gradient_is_skipped(self):
        theta = np.array([1.0, 2.0])
        adam = Adam(2)
        assert adam.step(theta, np.array([np.nan, 0.1])) is False
        assert np.array_equal(theta, [1.0, 2.0])
        assert adam.t == 0

    def test_sgd(self):
        theta = np.array([1.0])
        assert make_optimizer("sgd", 1, 0.1).step(theta, np.array([2.0]))
        assert theta[0] == pytest.approx(0.8)
        assert isinstance(make_optimizer("adam", 1, 0.1), Adam)
        assert isinstance(make_optimizer("sgd", 1, 0.1), SGD)
        with pytest.raises(ValueError):
            make_optimizer("rmsprop", 1, 0.1)


class TestSnapshots:
    """Binary network snapshots."""

    def test_save_and_load(self, tmp_path):
        net = Network(qnet_spec((8, 8), conv_channels=(2, 3), dense=8), seed=4)
        net.theta += 0.01
        net.train_steps = 17
        path = tmp_path / "network.bin"
        net.save(str(path), extra={"algorithm": "ldqn"})

        restored, header = Network.load(str(path))
        assert np.array_equal(restored.theta, net.theta)
        assert np.array_equal(restored.target, net.target)
        assert restored.train_steps == 17
        assert header["algorithm"] == "ldqn"
        assert NetworkSpec.from_dict(header["spec"]).to_dict() == net.spec.to_dict()

    def test_truncated_snapshot(self, tmp_path):
        net = Network(tiny_spec((4, 4), hidden=3), seed=0)
        path = tmp_path / "network.bin"
        net.save(str(path))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError):
            Network.load(str(path))
