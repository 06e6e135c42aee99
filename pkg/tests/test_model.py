import numpy as np
import pytest

from vred import autodiff as ad
from vred.errors import ConfigError, FormatError, ShapeError
from vred.layers import LstmState, named_parameters
from vred.model import (VredConfig, VredParams, calibrate_output, decode_sequence, elbo_loss, encode_sequence,
                        generate_step, posterior_step, prior_step, sample_reparam, threshold_latent)
from conftest import SMALL_VRED

CFG = SMALL_VRED


def params(seed=0, cfg=CFG):
    return VredParams.init(cfg, np.random.default_rng(seed))


def windows(seed, steps=3, batch=None, cfg=CFG):
    shape = (steps, cfg.input_dim) if batch is None else (steps, cfg.input_dim, batch)
    return np.random.default_rng(seed).uniform(0.05, 0.95, size=shape)


class TestConfig:
    def test_defaults(self):
        cfg = VredConfig()
        assert (cfg.latent_dim, cfg.hidden, cfg.input_dim) == (128, 128, 1024)

    def test_latent_larger_than_window_rejected(self):
        with pytest.raises(ConfigError):
            VredConfig(latent_dim=65, feature_channels=4, window_frames=16)

    def test_non_positive_rejected(self):
        with pytest.raises(ConfigError):
            VredConfig(hidden=0)


class TestPriorPosterior:
    def test_zero_params_give_half(self):
        p = params()
        for _, t in named_parameters(p):
            t.data[...] = 0.0
        out = prior_step(p, CFG, ad.constant(np.zeros(CFG.hidden))).data
        np.testing.assert_array_equal(out, 0.5)

    def test_extreme_params_stay_clamped(self):
        p = params()
        for _, t in named_parameters(p):
            t.data[...] = 1e3
        h = ad.constant(np.ones(CFG.hidden))
        for out in (prior_step(p, CFG, h).data, posterior_step(p, CFG, ad.constant(np.ones(CFG.input_dim)), h).data):
            assert np.all(out >= CFG.prob_eps) and np.all(out <= 1 - CFG.prob_eps)

    def test_posterior_window_size_checked(self):
        with pytest.raises(ShapeError):
            posterior_step(params(), CFG, ad.constant(np.zeros(CFG.input_dim + 1)), ad.constant(np.zeros(CFG.hidden)))

    def test_generate_variance_floor(self):
        p = params()
        for _, t in named_parameters(p.dec_mlp):
            t.data[...] = 50.0  # saturate p_x near 1
        _, var = generate_step(p, CFG, ad.constant(np.ones(CFG.latent_dim)), ad.constant(np.ones(CFG.hidden)))
        np.testing.assert_array_equal(var.data, CFG.var_floor)


class TestBernoulliKl:
    def test_zero_on_diagonal(self, rng):
        q = rng.uniform(1e-6, 1 - 1e-6, 1000)
        np.testing.assert_allclose(ad.bernoulli_kl(ad.constant(q), ad.constant(q)).data, 0.0, atol=1e-12)

    def test_non_negative(self, rng):
        q, p = rng.uniform(1e-6, 1 - 1e-6, (2, 10_000))
        assert np.all(ad.bernoulli_kl(ad.constant(q), ad.constant(p)).data >= 0)


class TestReparameterization:
    def test_value_equals_bit(self, rng):
        p = ad.constant(rng.uniform(1e-6, 1 - 1e-6, 100_000))
        s = sample_reparam(p, rng)
        assert set(np.unique(s.value.data)) <= {0.0, 1.0}
        np.testing.assert_array_equal(s.value.data, s.bits.astype(np.float64))

    def test_empirical_mean(self):
        n, p = 100_000, 0.3
        s = sample_reparam(ad.constant(np.full(n, p)), np.random.default_rng(0))
        assert abs(s.bits.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)

    def test_gradient_is_one(self, rng):
        p = ad.parameter(rng.uniform(0.01, 0.99, 50))
        grads = ad.backward(ad.total(sample_reparam(p, rng).value))
        np.testing.assert_array_equal(grads[p], 1.0)

    def test_replayed_correction(self, rng):
        p = ad.constant(rng.uniform(0.1, 0.9, 20))
        first = sample_reparam(p, rng)
        again = sample_reparam(p, None, first.correction)
        np.testing.assert_array_equal(first.value.data, again.value.data)

    def test_threshold_tie_goes_to_one(self):
        np.testing.assert_array_equal(threshold_latent(np.array([0.5, 0.4999999, 0.9])), [1, 0, 1])


class TestElbo:
    def test_decomposes_into_kl_and_log_lik(self):
        loss, diag = elbo_loss(params(), CFG, windows(1), np.random.default_rng(0))
        np.testing.assert_allclose(loss.item(), diag.total_kl - diag.total_log_lik, rtol=0, atol=1e-10)
        assert all(k >= 0 for k in diag.kl)

    def test_batch_is_column_mean(self):
        p, x = params(), windows(2, batch=3)
        batched, diag = elbo_loss(p, CFG, x, np.random.default_rng(0))
        singles = [elbo_loss(p, CFG, x[:, :, b], corrections=[c[:, b] for c in diag.corrections])[0].item()
                   for b in range(3)]
        np.testing.assert_allclose(batched.item(), np.mean(singles), rtol=1e-12)

    def test_seeded(self):
        a = elbo_loss(params(), CFG, windows(3), np.random.default_rng(5))[0].item()
        b = elbo_loss(params(), CFG, windows(3), np.random.default_rng(5))[0].item()
        assert a == b

    def test_empty_sequence(self):
        with pytest.raises(ShapeError):
            elbo_loss(params(), CFG, [], np.random.default_rng(0))


class TestSeparability:
    def test_decoder_replays_encoder(self):
        p, x = params(3), windows(4, steps=6)
        steps = encode_sequence(p, CFG, x)
        decoded = decode_sequence(p, CFG, [s.bits for s in steps])
        np.testing.assert_array_equal(decoded, np.stack([s.p_x for s in steps]))

    def test_threshold_is_deterministic(self):
        p, x = params(3), windows(4)
        a = [s.bits for s in encode_sequence(p, CFG, x)]
        b = [s.bits for s in encode_sequence(p, CFG, x)]
        np.testing.assert_array_equal(a, b)

    def test_sample_mode_seeded(self):
        p, x = params(3), windows(4)
        a = [s.bits for s in encode_sequence(p, CFG, x, "sample", seed=9)]
        b = [s.bits for s in encode_sequence(p, CFG, x, "sample", seed=9)]
        np.testing.assert_array_equal(a, b)

    def test_reparam_value_is_bits(self):
        for s in encode_sequence(params(), CFG, windows(5), "sample", seed=1):
            np.testing.assert_array_equal(s.reparam_value, s.bits)

    def test_wrong_code_size(self):
        with pytest.raises(FormatError):
            decode_sequence(params(), CFG, [np.zeros(CFG.latent_dim + 1, dtype=np.uint8)])

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            encode_sequence(params(), CFG, windows(0), mode="argmax")


class TestCalibration:
    @staticmethod
    def nll(x, p, floor=1e-4):
        v = np.maximum(p * (1 - p), floor)
        return 0.5 * np.log(2 * np.pi * v) + (x - p) ** 2 / (2 * v)

    def test_inverts_likelihood_optimum(self):
        """For each target x, p*=argmin NLL; calibrate_output(p*) recovers x."""
        grid = np.linspace(1e-4, 1 - 1e-4, 400_001)
        for x in (0.05, 0.2, 0.4, 0.5, 0.63, 0.9):
            p_star = grid[np.argmin(self.nll(x, grid))]
            np.testing.assert_allclose(calibrate_output(np.array([p_star]), 1e-4)[0], x, atol=1e-4)

    def test_fixed_points(self):
        np.testing.assert_allclose(calibrate_output(np.array([0.5]), 1e-4), [0.5])
        np.testing.assert_array_equal(calibrate_output(np.array([1e-6]), 1e-4), [1e-6])

    def test_monotone(self):
        p = np.linspace(0.001, 0.999, 999)
        assert np.all(np.diff(calibrate_output(p, 1e-4)) > 0)
