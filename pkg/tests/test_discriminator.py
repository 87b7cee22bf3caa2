"""Robust binary training: loss values, ramp schedule and reproducibility."""

import numpy as np
import pytest

from prood import ibp, metrics, nn
from prood.autodiff import as_tensor
from prood.discriminator import (DiscTrainConfig, binary_robust_loss, log_to_csv,
                                 ramp, train_discriminator)
from prood.joint import TrainingDivergedError


def tiny_disc(seed=0, d=2, width=8, bias=1.0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    trunk = nn.LayerStack([
        nn.FullyConnected(rng.standard_normal((width, d)).astype(dtype),
                          np.zeros(width, dtype=dtype)),
        nn.ReLU(),
    ], (d,))
    head = nn.NegExpHead(rng.standard_normal(width).astype(dtype),
                         np.array([bias], dtype=dtype))
    return nn.Discriminator(trunk, head)


def separable_clusters(rng, n=200, gap=0.4):
    x_in = np.clip(rng.normal(0.2, 0.05, size=(n, 2)), 0, 1)
    x_out = np.clip(rng.normal(0.8, 0.05, size=(n, 2)), 0, 1)
    # exhaustive margin check: every pairwise distance exceeds the gap
    dists = np.linalg.norm(x_in[:, None, :] - x_out[None, :, :], axis=2)
    assert dists.min() > gap
    return x_in.astype(np.float32), x_out.astype(np.float32)


class TestRamp:
    def setup_method(self):
        self.cfg = DiscTrainConfig(epochs=100, epsilon_final=0.01, ramp_epochs=30)

    def test_start(self):
        assert ramp(0, self.cfg) == (0.0, 0.0)

    def test_end_of_ramp(self):
        assert ramp(30, self.cfg) == (0.01, 1.0)
        assert ramp(99, self.cfg) == (0.01, 1.0)

    def test_midpoint_is_half(self):
        eps, kappa = ramp(15, self.cfg)
        assert eps == pytest.approx(0.005)
        assert kappa == pytest.approx(0.5)

    def test_out_of_range_epoch(self):
        with pytest.raises(ValueError):
            ramp(100, self.cfg)

    def test_default_schedule_fractions(self):
        cfg = DiscTrainConfig(epochs=200)
        assert cfg.lr_drop_epochs == (100, 150, 170)
        assert cfg.ramp_epochs == 60


class TestBinaryRobustLoss:
    def test_zero_radius_reduces_to_plain_logistic(self):
        rng = np.random.default_rng(0)
        disc = tiny_disc()
        x_in = rng.random((5, 2))
        x_out = rng.random((7, 2))
        loss, _, parts = binary_robust_loss(disc, x_in, x_out, 0.0, 1.0)
        g_out = disc.logit_values(x_out)
        expected_out = np.mean(np.maximum(g_out, 0) + np.log1p(np.exp(-np.abs(g_out))))
        assert parts["out_loss"] == pytest.approx(expected_out, abs=1e-6)

    def test_kappa_zero_depends_only_on_in_batch(self):
        rng = np.random.default_rng(1)
        disc = tiny_disc()
        x_in = rng.random((6, 2))
        loss_a, grads_a, _ = binary_robust_loss(disc, x_in, rng.random((6, 2)), 0.05, 0.0)
        loss_b, grads_b, _ = binary_robust_loss(disc, x_in, rng.random((9, 2)), 0.05, 0.0)
        assert loss_a == loss_b
        for ga, gb in zip(grads_a, grads_b):
            np.testing.assert_array_equal(ga, gb)

    def test_two_weight_model_hand_evaluated(self):
        # g(x) = -c * relu(a x) + b with a=1.2, c=0.7, b=0.4
        a, c, b = 1.2, 0.7, 0.4
        trunk = nn.LayerStack([
            nn.FullyConnected(np.array([[a]]), np.zeros(1)), nn.ReLU(),
        ], (1,))
        disc = nn.Discriminator(trunk, nn.NegExpHead(np.array([np.log(c)]), np.array([b])))
        x_in = np.array([[0.8]])
        z = np.array([[0.3]])
        eps, kappa = 0.05, 0.6

        def softplus(t):
            return np.maximum(t, 0) + np.log1p(np.exp(-abs(t)))

        g_in = -c * max(a * 0.8, 0.0) + b
        upper = -c * max(a * (0.3 - eps), 0.0) + b  # lower pre-logit through W<0
        expected = softplus(-g_in) + kappa * softplus(upper)

        loss, _, parts = binary_robust_loss(disc, x_in, z, eps, kappa)
        assert loss == pytest.approx(expected, abs=1e-6)
        assert parts["in_loss"] == pytest.approx(softplus(-g_in), abs=1e-6)

    def test_monotone_in_radius(self):
        rng = np.random.default_rng(2)
        disc = tiny_disc()
        x_in = rng.random((4, 2))
        x_out = rng.random((4, 2))
        losses = [binary_robust_loss(disc, x_in, x_out, e, 1.0)[0]
                  for e in (0.0, 0.02, 0.05, 0.2)]
        assert all(l2 >= l1 - 1e-9 for l1, l2 in zip(losses, losses[1:]))

    def test_invalid_kappa_rejected(self):
        disc = tiny_disc()
        with pytest.raises(ValueError):
            binary_robust_loss(disc, np.zeros((1, 2)), np.zeros((1, 2)), 0.01, 1.5)


class TestTrainDiscriminator:
    def test_separable_toy_reaches_high_auc(self):
        rng = np.random.default_rng(3)
        x_in, x_out = separable_clusters(rng)
        cfg = DiscTrainConfig(epochs=60, lr=3e-3, batch_in=64, batch_out=64,
                              epsilon_final=0.01, weight_decay=0.0, seed=5)
        disc, rows = train_discriminator(cfg, x_in, x_out, disc=tiny_disc(bias=3.0))
        score_in = disc.logit_values(x_in)
        score_out = disc.logit_values(x_out)
        assert metrics.auc(score_in, score_out) > 0.99
        assert len(rows) == 60

    def test_zero_radius_training_decreases_in_loss(self):
        rng = np.random.default_rng(4)
        x_in, x_out = separable_clusters(rng, n=100)
        cfg = DiscTrainConfig(epochs=20, lr=3e-3, batch_in=50, batch_out=50,
                              epsilon_final=0.0, weight_decay=0.0, seed=1)
        _, rows = train_discriminator(cfg, x_in, x_out, disc=tiny_disc(bias=3.0))
        assert rows[-1]["in_loss"] < rows[0]["in_loss"]

    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(5)
        x_in, x_out = separable_clusters(rng, n=60)
        cfg = DiscTrainConfig(epochs=5, lr=1e-3, batch_in=30, batch_out=30, seed=9)
        d1, _ = train_discriminator(cfg, x_in, x_out, disc=tiny_disc(bias=3.0, dtype=np.float32))
        d2, _ = train_discriminator(cfg, x_in, x_out, disc=tiny_disc(bias=3.0, dtype=np.float32))
        for p1, p2 in zip(d1.parameters(), d2.parameters()):
            assert np.array_equal(p1.data, p2.data)

    def test_head_weights_stay_negative_through_training(self):
        rng = np.random.default_rng(6)
        x_in, x_out = separable_clusters(rng, n=60)
        cfg = DiscTrainConfig(epochs=8, lr=5e-3, batch_in=30, batch_out=30, seed=2)
        disc, _ = train_discriminator(cfg, x_in, x_out, disc=tiny_disc(bias=3.0))
        assert np.all(disc.head.weights().data < 0)

    def test_empty_data_rejected(self):
        cfg = DiscTrainConfig(epochs=1)
        with pytest.raises(ValueError):
            train_discriminator(cfg, np.zeros((0, 2)), np.zeros((3, 2)), disc=tiny_disc())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self):
        rng = np.random.default_rng(7)
        x_in, x_out = separable_clusters(rng, n=40)
        cfg = DiscTrainConfig(epochs=3, lr=1e25, batch_in=20, batch_out=20,
                              weight_decay=0.0, seed=0)
        with pytest.raises(TrainingDivergedError):
            train_discriminator(cfg, x_in, x_out, disc=tiny_disc(bias=3.0))

    def test_log_csv_round_trip(self):
        rows = [{"epoch": 0, "eps_t": 0.0, "kappa_t": 0.0,
                 "in_loss": 0.25, "out_loss": 3.0, "total": 0.25}]
        text = log_to_csv(rows)
        lines = text.splitlines()
        assert lines[0] == "epoch,eps_t,kappa_t,in_loss,out_loss,total"
        assert lines[1].startswith("0,0.0,0.0,0.25,")
