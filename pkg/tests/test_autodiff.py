"""Gradient and forward checks for the autodiff engine and every layer type."""

import numpy as np
import pytest

from prood.autodiff import Tensor, avg_pool2d, conv2d, log_softmax
from prood import nn

from gradcheck import check_param_grads, max_rel_err, numeric_grad


def r64(rng, *shape):
    return Tensor(rng.standard_normal(shape))


class TestElementwiseOps:
    @pytest.mark.parametrize("seed", range(20))
    def test_unary_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = r64(rng, 4, 5)

        def loss():
            y = x.exp().clip_min(0.3).log() * 0.7 + x.sigmoid() - x.softplus()
            return (y * y).sum()

        check_param_grads(loss, [x])

    @pytest.mark.parametrize("seed", range(20))
    def test_relu_and_leaky(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = r64(rng, 6, 3)

        def loss():
            return (x.relu() + x.leaky_relu(0.01) * 0.5).sum()

        check_param_grads(loss, [x])

    @pytest.mark.parametrize("seed", range(20))
    def test_pos_neg_split(self, seed):
        rng = np.random.default_rng(200 + seed)
        w = r64(rng, 5, 4)
        a = Tensor(rng.standard_normal((2, 4)))

        def loss():
            return (a @ w.pos_part().T - a @ w.neg_part().T).sum()

        check_param_grads(loss, [w])

    def test_broadcast_add_mul(self):
        rng = np.random.default_rng(7)
        a = r64(rng, 3, 4)
        b = r64(rng, 4)

        def loss():
            return ((a + b) * b).sum()

        check_param_grads(loss, [a, b])

    def test_vmax_gradient_goes_to_first_argmax(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]]))
        y = x.vmax(axis=1).sum()
        y.backward()
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])

    def test_mean_matches_manual(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert float(x.mean().data) == pytest.approx(2.5)
        x.mean().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))


class TestStructuredOps:
    @pytest.mark.parametrize("seed", range(20))
    def test_matmul(self, seed):
        rng = np.random.default_rng(300 + seed)
        a = r64(rng, 3, 4)
        w = r64(rng, 5, 4)

        def loss():
            return ((a @ w.T) * (a @ w.T)).sum()

        check_param_grads(loss, [a, w])

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d(self, seed, stride, padding):
        rng = np.random.default_rng(400 + seed)
        x = Tensor(rng.standard_normal((2, 2, 5, 5)))
        k = Tensor(rng.standard_normal((3, 2, 3, 3)))
        b = Tensor(rng.standard_normal(3))

        def loss():
            y = conv2d(x, k, b, stride, padding)
            return (y * y).sum()

        check_param_grads(loss, [x, k, b])

    def test_conv2d_matches_naive_loops(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 6, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        stride, pad = 2, 1
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = (patch * k[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_avg_pool(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))

        def loss():
            y = avg_pool2d(x, 2)
            return (y * y).sum()

        check_param_grads(loss, [x])

    def test_log_softmax_rows_normalize(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 6)) * 50)
        p = log_softmax(x, axis=1).exp().data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_log_softmax_grad(self, seed):
        rng = np.random.default_rng(600 + seed)
        x = r64(rng, 3, 4)
        w = Tensor(rng.standard_normal((3, 4)))

        def loss():
            return (log_softmax(x, axis=1) * w).sum()

        check_param_grads(loss, [x])


class TestLayerGradients:
    """Every layer variant against central finite differences (>=20 draws)."""

    @pytest.mark.parametrize("seed", range(20))
    def test_fully_connected(self, seed):
        rng = np.random.default_rng(700 + seed)
        layer = nn.FullyConnected(rng.standard_normal((4, 6)), rng.standard_normal(4))
        x = Tensor(rng.standard_normal((3, 6)))

        def loss():
            return (layer.apply(x) * layer.apply(x)).sum()

        check_param_grads(loss, layer.parameters() + [x])

    @pytest.mark.parametrize("seed", range(20))
    def test_conv_layer(self, seed):
        rng = np.random.default_rng(800 + seed)
        layer = nn.Conv2d(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3),
                          stride=2, padding=1)
        x = Tensor(rng.standard_normal((2, 2, 6, 6)))

        def loss():
            return layer.apply(x).sum()

        check_param_grads(loss, layer.parameters() + [x])

    @pytest.mark.parametrize("seed", range(20))
    def test_network_stack(self, seed):
        rng = np.random.default_rng(900 + seed)
        net = nn.Network([
            nn.Conv2d(rng.standard_normal((2, 1, 3, 3)) * 0.5, rng.standard_normal(2), 1, 1),
            nn.ReLU(),
            nn.AvgPool(2),
            nn.Flatten(),
            nn.FullyConnected(rng.standard_normal((3, 8)) * 0.5, rng.standard_normal(3)),
        ], (1, 4, 4))
        x = Tensor(rng.standard_normal((2, 1, 4, 4)))

        def loss():
            return (net(x) * net(x)).sum()

        check_param_grads(loss, net.parameters() + [x])

    @pytest.mark.parametrize("seed", range(20))
    def test_neg_exp_head(self, seed):
        rng = np.random.default_rng(1000 + seed)
        head = nn.NegExpHead(rng.standard_normal(5), np.array([0.3]))
        x = Tensor(rng.standard_normal((4, 5)))

        def loss():
            return (head.apply(x) * head.apply(x)).sum()

        check_param_grads(loss, head.parameters() + [x])


class TestForwardContracts:
    def test_identity_fully_connected(self):
        layer = nn.FullyConnected(np.eye(2), np.zeros(2))
        net = nn.Network([layer], (2,))
        acts = nn.forward(net, np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(acts[-1].data, [[1.0, 2.0]])

    def test_relu_definition(self):
        x = Tensor(np.array([-1.0, 0.0, 3.0]))
        np.testing.assert_array_equal(x.relu().data, [0.0, 0.0, 3.0])

    def test_two_layer_matches_hand_evaluation(self):
        # oracle: explicit matrix products with a ReLU in between
        rng = np.random.default_rng(42)
        w1 = rng.standard_normal((3, 2))
        b1 = rng.standard_normal(3)
        w2 = rng.standard_normal((2, 3))
        b2 = rng.standard_normal(2)
        net = nn.Network([
            nn.FullyConnected(w1, b1), nn.ReLU(), nn.FullyConnected(w2, b2),
        ], (2,))
        x = rng.standard_normal((1, 2))
        expected = np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2
        got = nn.forward(net, x)[-1].data
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_forward_is_pure(self):
        rng = np.random.default_rng(5)
        net = nn.build_classifier(rng, (1, 8, 8), 3)
        x = rng.random((2, 1, 8, 8)).astype(np.float32)
        a = nn.forward(net, x)[-1].data
        b = nn.forward(net, x)[-1].data
        assert np.array_equal(a, b)

    def test_forward_shape_mismatch_raises(self):
        rng = np.random.default_rng(5)
        net = nn.build_classifier(rng, (1, 8, 8), 3)
        with pytest.raises(nn.ShapeError):
            nn.forward(net, np.zeros((2, 1, 4, 4), dtype=np.float32))

    def test_construction_rejects_bad_composition(self):
        with pytest.raises(nn.ShapeError):
            nn.Network([
                nn.FullyConnected(np.zeros((3, 2)), np.zeros(3)),
                nn.FullyConnected(np.zeros((3, 4)), np.zeros(3)),
            ], (2,))


class TestBackwardContracts:
    def test_zero_logit_grad_gives_zero_grads(self):
        rng = np.random.default_rng(1)
        net = nn.build_classifier(rng, (1, 8, 8), 2, preset="tiny")
        acts = nn.forward(net, rng.random((3, 1, 8, 8)).astype(np.float32))
        grads = nn.backward(net, acts, np.zeros_like(acts[-1].data))
        assert all(np.all(g == 0) for g in grads)

    def test_linear_model_analytic(self):
        # y = w*x with x=2: dy/dw = 2
        net = nn.Network([nn.FullyConnected(np.array([[1.5]]), np.zeros(1))], (1,))
        acts = nn.forward(net, np.array([[2.0]]))
        grads = nn.backward(net, acts, np.ones((1, 1)))
        np.testing.assert_allclose(grads[0], [[2.0]])

    def test_mismatched_activation_list_rejected(self):
        rng = np.random.default_rng(1)
        net = nn.build_classifier(rng, (1, 8, 8), 2, preset="tiny")
        acts = nn.forward(net, rng.random((1, 1, 8, 8)).astype(np.float32))
        with pytest.raises(ValueError):
            nn.backward(net, acts[:-1], np.zeros((1, 2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_three_layer_net_finite_differences(self, seed):
        rng = np.random.default_rng(1100 + seed)
        net = nn.Network([
            nn.FullyConnected(rng.standard_normal((5, 4)), rng.standard_normal(5)),
            nn.ReLU(),
            nn.FullyConnected(rng.standard_normal((4, 5)), rng.standard_normal(4)),
            nn.ReLU(),
            nn.FullyConnected(rng.standard_normal((2, 4)), rng.standard_normal(2)),
        ], (4,))
        x = rng.standard_normal((3, 4))
        seed_grad = rng.standard_normal((3, 2))

        acts = nn.forward(net, x)
        grads = nn.backward(net, acts, seed_grad)

        for p, analytic in zip(net.parameters(), grads):
            def scalar_at(v, p=p):
                saved = p.data
                p.data = v
                try:
                    out = nn.forward(net, x)[-1].data
                    return float((out * seed_grad).sum())
                finally:
                    p.data = saved

            fd = numeric_grad(scalar_at, p.data)
            assert max_rel_err(analytic, fd) < 1e-4
