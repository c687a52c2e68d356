"""Dense-net forward/backward against hand computation and finite differences."""

import numpy as np
import pytest

from pude import neural
from pude.neural import (
    ACT_IDENTITY,
    ACT_LEAKY_RELU,
    AdamState,
    BatchNorm,
    DenseNet,
    Layer,
    NeuralError,
    VaeConfig,
    VaeModel,
    adam_step,
    backward,
    encode,
    forward,
    gaussian_kl,
    sigmoid,
    train_vae,
)


def _flatten(arrs):
    return np.concatenate([a.ravel() for a in arrs])


def finite_difference_grads(net, batch, upstream, mode, step=1e-5):
    """Central finite differences of sum(upstream * forward(batch))."""
    params = net.get_params()
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float((forward(net, batch, mode) * upstream).sum())
            flat[j] = orig - step
            f_minus = float((forward(net, batch, mode) * upstream).sum())
            flat[j] = orig
            g.ravel()[j] = (f_plus - f_minus) / (2 * step)
        grads.append(g)
    return grads


class TestForward:
    def test_identity_layer_is_identity(self):
        net = DenseNet([Layer(np.eye(3), np.zeros(3), ACT_IDENTITY)])
        x = np.array([[1.0, -2.0, 0.5]])
        assert np.array_equal(forward(net, x), x)

    def test_leaky_relu_values(self):
        net = DenseNet([Layer(np.eye(1), np.zeros(1), ACT_LEAKY_RELU)])
        assert forward(net, np.array([[-1.0]]))[0, 0] == pytest.approx(-0.01)
        assert forward(net, np.array([[2.0]]))[0, 0] == pytest.approx(2.0)

    def test_two_layer_hand_computation(self):
        # x = (1, 2); layer1: W=[[1, -1], [0, 2]], b=(0.5, -3), leaky ReLU;
        # z1 = (1*1 - 1*2 + 0.5, 2*2 - 3) = (-0.5, 1) -> a1 = (-0.005, 1)
        # layer2: W=[[2, 1]], b=(0,): out = 2*(-0.005) + 1*1 = 0.99
        net = DenseNet(
            [
                Layer(np.array([[1.0, -1.0], [0.0, 2.0]]), np.array([0.5, -3.0]), ACT_LEAKY_RELU),
                Layer(np.array([[2.0, 1.0]]), np.zeros(1), ACT_IDENTITY),
            ]
        )
        out = forward(net, np.array([[1.0, 2.0]]))
        assert out[0, 0] == pytest.approx(0.99, abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        net = DenseNet([Layer(np.eye(3), np.zeros(3), ACT_IDENTITY)])
        with pytest.raises(NeuralError):
            forward(net, np.zeros((2, 4)))

    def test_batchnorm_train_needs_two_rows(self):
        layer = Layer(np.eye(2), np.zeros(2), ACT_IDENTITY, BatchNorm.identity(2))
        net = DenseNet([layer])
        with pytest.raises(NeuralError, match=">= 2"):
            forward(net, np.zeros((1, 2)), mode="train")

    def test_batchnorm_train_updates_running_stats(self):
        layer = Layer(np.eye(1), np.zeros(1), ACT_IDENTITY, BatchNorm.identity(1))
        net = DenseNet([layer])
        x = np.array([[0.0], [4.0]])
        forward(net, x, mode="train")
        bn = net.layers[0].bn
        assert bn.running_mean[0] == pytest.approx(0.1 * 2.0)  # momentum 0.1
        assert bn.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 4.0)

    def test_eval_mode_is_pure(self):
        rng = np.random.default_rng(0)
        net = DenseNet.build([3, 4, 2], rng, batch_norm=True)
        x = rng.standard_normal((5, 3))
        before = [a.copy() for a in net.get_params()]
        out1 = forward(net, x, mode="eval")
        out2 = forward(net, x, mode="eval")
        assert np.array_equal(out1, out2)
        for a, b in zip(before, net.get_params()):
            assert np.array_equal(a, b)


class TestBackward:
    def test_linear_layer_closed_form(self):
        # y = Wx + b with upstream of ones: d/db = 1s, d/dW = outer(1s, x).
        net = DenseNet([Layer(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2), ACT_IDENTITY)])
        x = np.array([[5.0, -1.0]])
        grads, input_grad = backward(net, x, np.ones((1, 2)))
        assert np.array_equal(grads[1], np.ones(2))
        assert np.array_equal(grads[0], np.array([[5.0, -1.0], [5.0, -1.0]]))
        # input grad = upstream @ W = column sums of W
        assert np.array_equal(input_grad, np.array([[4.0, 6.0]]))

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(1)
        net = DenseNet.build([3, 5, 2], rng)
        grads, input_grad = backward(net, rng.standard_normal((4, 3)), np.zeros((4, 2)))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(input_grad == 0)

    @pytest.mark.parametrize("mode,batch_norm", [("eval", False), ("eval", True), ("train", True)])
    def test_three_layer_matches_finite_differences(self, mode, batch_norm):
        rng = np.random.default_rng(7)
        net = DenseNet.build([4, 6, 5, 2], rng, batch_norm=batch_norm)
        x = rng.standard_normal((6, 4))
        upstream = rng.standard_normal((6, 2))
        grads, _ = backward(net, x, upstream, mode=mode)
        fd = finite_difference_grads(net, x, upstream, mode)
        a, b = _flatten(grads), _flatten(fd)
        # Exactly-zero analytic gradients (e.g. biases under train-mode batch
        # norm) leave only FD noise in the denominator; floor it.
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        assert np.max(np.abs(a - b) / denom) < 1e-4

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        net = DenseNet.build([3, 8, 1], rng)
        x = rng.standard_normal((2, 3))
        upstream = np.ones((2, 1))
        _, input_grad = backward(net, x, upstream)
        step = 1e-6
        fd = np.zeros_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += step
                xm[i, j] -= step
                fd[i, j] = (forward(net, xp).sum() - forward(net, xm).sum()) / (2 * step)
        np.testing.assert_allclose(input_grad, fd, rtol=1e-5, atol=1e-8)


class TestAdam:
    def test_first_step_closed_form(self):
        # Scalar param, grad 2, lr 1e-3: m_hat=2, v_hat=4,
        # delta = -lr * 2 / (2 + eps) = -9.99999995e-4 (~ -lr * sign(g)).
        p = [np.array([0.0])]
        g = [np.array([2.0])]
        state = AdamState.init(p, lr=1e-3)
        new_p, new_state = adam_step(p, g, state)
        m_hat = (1 - 0.9) * 2.0 / (1 - 0.9)
        v_hat = (1 - 0.999) * 4.0 / (1 - 0.999)
        expected = -1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert new_p[0][0] == pytest.approx(expected, abs=1e-18)
        assert abs(new_p[0][0] - (-9.99999996e-4)) < 1e-11
        assert new_state.step == 1

    def test_zero_gradient_is_noop(self):
        p = [np.array([1.5, -2.0])]
        state = AdamState.init(p, lr=1e-3)
        new_p, new_state = adam_step(p, [np.zeros(2)], state)
        assert np.array_equal(new_p[0], p[0])
        assert new_state.step == 1

    def test_deterministic(self):
        p = [np.array([0.3])]
        g = [np.array([-1.2])]
        s = AdamState.init(p, lr=1e-2)
        a1, s1 = adam_step(p, g, s)
        a2, s2 = adam_step(p, g, s)
        assert np.array_equal(a1[0], a2[0])
        assert np.array_equal(s1.m[0], s2.m[0])

    def test_shape_mismatch(self):
        p = [np.zeros(3)]
        with pytest.raises(NeuralError):
            adam_step(p, [np.zeros(2)], AdamState.init(p))


class TestVae:
    def test_kl_zero_for_standard_normal_posterior(self):
        assert gaussian_kl(np.zeros((1, 4)), np.zeros((1, 4)))[0] == 0.0

    def test_kl_closed_form_unit_mean(self):
        # KL = 0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2) = 0.5 for mu=1, logvar=0.
        assert gaussian_kl(np.array([[1.0]]), np.array([[0.0]]))[0] == pytest.approx(0.5)

    def test_kl_nonnegative_random(self):
        rng = np.random.default_rng(2)
        mean = rng.standard_normal((100, 7))
        logvar = rng.standard_normal((100, 7))
        assert np.all(gaussian_kl(mean, logvar) >= 0)

    def test_encode_returns_posterior_mean_hand_case(self):
        # Linear encoder: top half of the output is the mean.
        w = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0], [0.0, 0.0]])
        enc = DenseNet([Layer(w, np.zeros(4), ACT_IDENTITY)])
        dec = DenseNet([Layer(np.zeros((2, 2)), np.zeros(2), ACT_IDENTITY)])
        vae = VaeModel(enc, dec)
        z = encode(vae, np.array([3.0, -1.0]))
        assert np.array_equal(z, np.array([3.0, -2.0]))

    def test_encode_batch_equals_rowwise(self):
        rng = np.random.default_rng(4)
        vae, _ = train_vae(
            rng.standard_normal((40, 5)),
            VaeConfig(latent_dim=2, hidden=8, epochs=2, batch_size=16, seed=0),
        )
        x = rng.standard_normal((6, 5))
        batch = encode(vae, x)
        rows = np.stack([encode(vae, x[i]) for i in range(6)])
        # Equal up to BLAS reduction order (batch matmul vs row matmul).
        np.testing.assert_allclose(batch, rows, rtol=1e-12, atol=1e-14)

    def test_reconstruction_loss_non_increasing_first_epochs(self):
        rng = np.random.default_rng(6)
        half = rng.standard_normal((150, 4)) + np.array([2.0, 0, 0, 0])
        other = rng.standard_normal((150, 4)) - np.array([2.0, 0, 0, 0])
        vectors = np.concatenate([half, other])
        _, trace = train_vae(
            vectors, VaeConfig(latent_dim=2, hidden=16, epochs=5, batch_size=32, seed=1)
        )
        recon = [row["recon"] for row in trace]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(recon, recon[1:]))

    def test_latent_must_be_smaller_than_input(self):
        with pytest.raises(NeuralError):
            train_vae(np.zeros((10, 3)), VaeConfig(latent_dim=3, epochs=1))


class TestCheckpoints:
    def test_net_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        net = DenseNet.build([3, 4, 1], rng, batch_norm=True)
        forward(net, rng.standard_normal((5, 3)), mode="train")  # move BN stats
        path = tmp_path / "net.pun"
        neural.save_nets(path, neural.KIND_NET, [net])
        kind, nets = neural.load_nets(path)
        assert kind == neural.KIND_NET
        x = rng.standard_normal((4, 3))
        assert np.array_equal(forward(net, x), forward(nets[0], x))

    def test_vae_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        vae, _ = train_vae(
            rng.standard_normal((30, 6)),
            VaeConfig(latent_dim=2, hidden=8, epochs=1, batch_size=16, seed=3),
        )
        path = tmp_path / "vae.pun"
        neural.save_vae(vae, path)
        loaded = neural.load_vae(path)
        x = rng.standard_normal((3, 6))
        assert np.array_equal(encode(vae, x), encode(loaded, x))


class TestSigmoid:
    def test_matches_reference_values(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5
        assert sigmoid(np.array([500.0]))[0] == pytest.approx(1.0)
        assert sigmoid(np.array([-500.0]))[0] == pytest.approx(0.0, abs=1e-200)

    def test_symmetry(self):
        x = np.linspace(-30, 30, 1001)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)
