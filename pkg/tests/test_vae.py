import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibe import nd
from vibe.errors import ConfigError, DimensionError
from vibe.nd.gradcheck import check_gradients, directional_check
from vibe.vae import (
    TSCVAE,
    LatentGaussian,
    TSConvPlusBlock,
    TSConvPlusConfig,
    VaeArchitecture,
    VaeTrainConfig,
    elbo_loss,
    kl_gaussian,
    kl_warmup,
    reparameterize,
    tsconv_plus_block,
)


def toy_arch(channels=8, samples=12, **kw):
    kw.setdefault("widths", (4, 8, 8))
    kw.setdefault("stem_kernel", 5)
    kw.setdefault("temporal_kernels", (5, 3, 3))
    kw.setdefault("dtype", "float64")
    return VaeArchitecture(channels, samples, **kw)


def latent(mu, log_var):
    return LatentGaussian(nd.Tensor(np.asarray(mu, dtype=float)), nd.Tensor(np.asarray(log_var, dtype=float)))


class TestTSConvPlusConfig:
    def test_spatial_kernel_must_be_below_channel_count(self):
        TSConvPlusConfig(15, 3, 4)
        with pytest.raises(ConfigError):
            TSConvPlusConfig(15, 3, 3)
        with pytest.raises(ConfigError):
            TSConvPlusConfig(15, 63, 63)

    @pytest.mark.parametrize("kt,ks", [(4, 3), (15, 2), (0, 3), (15, -1)])
    def test_kernels_must_be_odd_positive(self, kt, ks):
        with pytest.raises(ConfigError):
            TSConvPlusConfig(kt, ks, 63)

    def test_architecture_validates_spatial_kernel(self):
        with pytest.raises(ConfigError):
            VaeArchitecture(3, 40)


class TestBlock:
    def test_eeg_stage0_shape(self):
        rng = np.random.default_rng(0)
        x = nd.Tensor(rng.standard_normal((2, 32, 63, 250)).astype(np.float32))
        out = tsconv_plus_block(x, TSConvPlusConfig(15, 3, 63), rng)
        assert out.shape == (2, 32, 63, 250)

    def test_zero_weights_pass_input_through(self):
        rng = np.random.default_rng(1)
        block = TSConvPlusBlock(6, 6, 5, 3, rng, channel_count=8, dtype=np.float64)
        for layer in (block.temporal, block.spatial):
            layer.conv.weight.data[...] = 0.0
            layer.conv.bias.data[...] = 0.0
        x = rng.standard_normal((2, 6, 8, 10))
        np.testing.assert_array_equal(block(nd.Tensor(x)).data, x)

    def test_skip_projection_when_features_change(self):
        rng = np.random.default_rng(2)
        block = TSConvPlusBlock(4, 6, 5, 3, rng, channel_count=8)
        assert block.skip is not None
        assert block(nd.Tensor(np.ones((1, 4, 8, 9), dtype=np.float32))).shape == (1, 6, 8, 9)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(3)
        block = TSConvPlusBlock(8, 8, 5, 3, rng, channel_count=8, dtype=np.float64)
        x = nd.Tensor(rng.standard_normal((1, 8, 7, 9)), requires_grad=True)
        w = nd.Tensor(rng.standard_normal((1, 8, 7, 9)))
        leaves = [x] + block.parameters()
        errors = check_gradients(lambda: (block(x) * w).sum(), leaves, eps=1e-4)
        assert max(errors) < 1e-3

    def test_baseline_variant_spans_full_extent(self):
        arch = toy_arch(baseline=True)
        model = TSCVAE(arch, np.random.default_rng(0))
        assert model.enc0.spatial_kernel == 8 and model.enc2.spatial_kernel == 2
        assert model.decode(model.encode(np.zeros((1, 8, 12))).mu).shape == (1, 8, 12)


class TestShapes:
    @pytest.mark.parametrize("channels,samples,expected", [
        (63, 250, (4, 16, 63)),
        (271, 200, (4, 68, 50)),
        (8, 12, (4, 2, 3)),
    ])
    def test_latent_shape_rule(self, channels, samples, expected):
        arch = VaeArchitecture(channels, samples)
        assert arch.latent_shape == expected
        h = math.ceil(math.ceil(channels / 2) / 2)
        w = math.ceil(math.ceil(samples / 2) / 2)
        assert expected == (4, h, w)

    def test_toy_encoder_runs_to_latent(self):
        model = TSCVAE(VaeArchitecture(8, 12, widths=(4, 4, 4)), np.random.default_rng(0))
        lat = model.encode(np.zeros((1, 8, 12), dtype=np.float32))
        assert lat.mu.shape == lat.log_var.shape == (4, 2, 3)

    def test_encode_and_decode_reject_wrong_shapes(self):
        model = TSCVAE(toy_arch(), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            model.encode(np.zeros((1, 9, 12)))
        with pytest.raises(DimensionError):
            model.decode(np.zeros((4, 3, 3)))

    def test_batched_and_single_agree(self):
        model = TSCVAE(toy_arch(), np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((3, 1, 8, 12))
        batched = model.encode(x).mu.data
        for i in range(3):
            np.testing.assert_allclose(model.encode(x[i]).mu.data, batched[i], rtol=1e-12, atol=1e-12)

    def test_encoding_is_deterministic(self):
        model = TSCVAE(toy_arch(), np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((1, 8, 12))
        np.testing.assert_array_equal(model.encode(x).mu.data, model.encode(x).mu.data)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(4, 13), st.integers(1, 30))
    def test_round_trip_shape(self, channels, samples):
        arch = toy_arch(channels, samples, widths=(2, 2, 2))
        model = TSCVAE(arch, np.random.default_rng(channels * 100 + samples))
        x = np.random.default_rng(0).standard_normal((2, 1, channels, samples))
        lat = model.encode(x)
        z = reparameterize(lat, np.random.default_rng(1))
        assert model.decode(z).shape == x.shape

    def test_initial_log_variance_near_zero(self):
        model = TSCVAE(VaeArchitecture(16, 40, widths=(8, 8, 8)), np.random.default_rng(5))
        d = model.arch.latent_channels
        np.testing.assert_array_equal(model.head.bias.data[d:], 0.0)


class TestReparameterize:
    def test_tiny_variance_returns_mean(self):
        rng = np.random.default_rng(0)
        mu = rng.standard_normal((4, 3, 5))
        z = reparameterize(latent(mu, np.full(mu.shape, -30.0)), rng)
        np.testing.assert_allclose(z.data, mu, atol=10 * math.exp(-15))

    def test_clamp_applied_by_encoder(self):
        model = TSCVAE(toy_arch(), np.random.default_rng(0))
        model.head.bias.data[4:] = -1e3
        lat = model.encode(np.zeros((1, 8, 12)))
        assert lat.log_var.data.min() == -30.0

    def test_standard_normal_moments(self):
        n = 1_000_000
        z = reparameterize(latent(np.zeros((n, 2)), np.zeros((n, 2))), np.random.default_rng(12)).data
        assert np.all(np.abs(z.mean(axis=0)) < 0.005)
        std = z.std(axis=0)
        assert np.all((std >= 0.995) & (std <= 1.005))

    def test_seed_reproduces_sample(self):
        lat = latent(np.ones((4, 2, 3)), np.full((4, 2, 3), -1.0))
        a = reparameterize(lat, np.random.default_rng(7)).data
        b = reparameterize(lat, np.random.default_rng(7)).data
        assert a.tobytes() == b.tobytes()

    def test_gradient_reaches_mean_and_log_variance(self):
        mu = nd.Tensor(np.array([0.5, -1.0]), requires_grad=True)
        lv = nd.Tensor(np.array([0.2, -0.4]), requires_grad=True)
        eps = np.random.default_rng(3).standard_normal(2)
        z = reparameterize(LatentGaussian(mu, lv), np.random.default_rng(3))
        z.sum().backward()
        np.testing.assert_allclose(mu.grad, [1.0, 1.0])
        np.testing.assert_allclose(lv.grad, 0.5 * eps * np.exp(0.5 * lv.data), rtol=1e-12)


def monte_carlo_kl(mu, log_var, n, rng):
    """Sample mean and standard error of log q(z) - log p(z) under z ~ q."""
    std = np.exp(0.5 * log_var)
    eps = rng.standard_normal((n,) + mu.shape)
    z = mu + std * eps
    log_q = (-0.5 * eps ** 2 - 0.5 * log_var).reshape(n, -1).sum(axis=1)
    log_p = (-0.5 * z ** 2).reshape(n, -1).sum(axis=1)
    diff = log_q - log_p
    return diff.mean(), diff.std(ddof=1) / math.sqrt(n)


class TestKL:
    def test_zero_at_prior(self):
        assert kl_gaussian(latent(np.zeros((4, 2, 3)), np.zeros((4, 2, 3)))).item() == 0.0

    def test_single_unit_mean(self):
        assert kl_gaussian(latent([1.0], [0.0])).item() == 0.5

    def test_batch_average(self):
        mu = np.zeros((2, 4, 1, 1))
        mu[0, 0] = 1.0
        assert kl_gaussian(latent(mu, np.zeros_like(mu))).item() == pytest.approx(0.25)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(2024)
        for _ in range(10):
            mu = rng.normal(0, 1, (3, 2))
            lv = rng.uniform(-1.5, 1.0, (3, 2))
            est, se = monte_carlo_kl(mu, lv, 1_000_000, rng)
            closed = kl_gaussian(latent(mu, lv)).item()
            assert abs(closed - est) < 3 * se

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-8, 8)), min_size=1, max_size=12))
    def test_non_negative_zero_only_at_prior(self, pairs):
        mu, lv = (np.array(v) for v in zip(*pairs))
        kl = kl_gaussian(latent(mu, lv)).item()
        assert kl >= 0.0
        if np.any(mu != 0) or np.any(lv != 0):
            assert kl > 0.0 or np.allclose(mu, 0, atol=1e-7) and np.allclose(lv, 0, atol=1e-3)


class TestElbo:
    def test_perfect_reconstruction_at_prior(self):
        x = nd.Tensor(np.random.default_rng(0).standard_normal((2, 1, 4, 5)))
        lat = latent(np.zeros((2, 4, 1, 2)), np.zeros((2, 4, 1, 2)))
        assert elbo_loss(x, x, lat, 1e-4).item() == 0.0

    def test_constant_offset_without_kl(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
        lat = latent(np.ones((2, 4, 1, 2)), np.zeros((2, 4, 1, 2)))
        assert elbo_loss(nd.Tensor(x + 1.0), nd.Tensor(x), lat, 0.0).item() == pytest.approx(1.0, rel=1e-14)

    def test_beta_increases_loss_when_kl_positive(self):
        x = nd.Tensor(np.zeros((1, 1, 2, 2)))
        x_hat = nd.Tensor(np.full((1, 1, 2, 2), 0.3))
        lat = latent(np.full((1, 4, 1, 1), 0.7), np.zeros((1, 4, 1, 1)))
        assert elbo_loss(x_hat, x, lat, 1e-3).item() > elbo_loss(x_hat, x, lat, 1e-4).item()

    def test_full_model_gradient(self):
        model = TSCVAE(toy_arch(widths=(2, 4, 4)), np.random.default_rng(8))
        x = nd.Tensor(np.random.default_rng(9).standard_normal((2, 1, 8, 12)))

        def loss():
            x_hat, lat = model(x, np.random.default_rng(10))
            return elbo_loss(x_hat, x, lat, 0.1)

        params = model.parameters()
        for seed in range(3):
            assert directional_check(loss, params, eps=1e-5, rng=np.random.default_rng(seed)) < 1e-3
        errors = check_gradients(loss, params[:6] + params[-4:], eps=1e-5, max_entries=12,
                                 rng=np.random.default_rng(11))
        assert max(errors) < 1e-3


class TestWarmup:
    cfg = VaeTrainConfig()

    def test_first_epoch(self):
        assert kl_warmup(1, self.cfg) == pytest.approx(1e-5, rel=1e-12)

    def test_saturates(self):
        assert kl_warmup(10, self.cfg) == pytest.approx(1e-4, rel=1e-12)
        assert kl_warmup(50, self.cfg) == pytest.approx(1e-4, rel=1e-12)

    def test_monotone_and_bounded(self):
        values = [kl_warmup(e, self.cfg) for e in range(1, self.cfg.epochs + 1)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert max(values) <= self.cfg.beta

    def test_epoch_out_of_range(self):
        with pytest.raises(ConfigError):
            kl_warmup(0, self.cfg)
        with pytest.raises(ConfigError):
            kl_warmup(101, self.cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            VaeTrainConfig(beta=-1.0)
        with pytest.raises(ConfigError):
            VaeTrainConfig(warmup_epochs=0)
        with pytest.raises(ConfigError):
            VaeTrainConfig(warmup_epochs=20, epochs=10)
