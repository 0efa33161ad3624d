import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import special, stats

from dpgmm import (
    DPGMMConfig,
    MixtureDensityDraws,
    VariationalPosterior,
    draw_noise,
    effective_components,
    elbo,
    elbo_grad,
    fit_advi,
    fit_truncation_sweep,
    init_posterior,
    mixture_log_lik,
    posterior_draws,
    posterior_log_lik,
    posterior_mean_weights,
    stick_break,
)
from utils import ShapeError

LOG_2PI = math.log(2 * math.pi)


def _with_params(posterior, params):
    return VariationalPosterior(posterior.config, posterior.dim, params, posterior.shift, posterior.scale)


class TestStickBreaking:
    def test_halves(self):
        assert_allclose(stick_break([0.5, 0.5]), [0.5, 0.25, 0.25])

    def test_general(self):
        assert_allclose(stick_break([0.2, 0.3, 0.4]), [0.2, 0.24, 0.224, 0.336])

    def test_single_component(self):
        assert_allclose(stick_break(np.zeros(0)), [1.0])

    def test_batched(self, rng):
        nu = rng.uniform(0.05, 0.95, size=(7, 4))
        pi = stick_break(nu)
        assert pi.shape == (7, 5)
        assert_allclose(pi.sum(axis=1), 1.0)
        assert np.all(pi > 0)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.5])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            stick_break([0.5, bad])


class TestMixtureLogLik:
    def test_two_components(self):
        value = mixture_log_lik(np.array([0.0]), [0.3, 0.7], [[0.0], [5.0]], [[1.0], [1.0]])
        assert value == pytest.approx(-2.1236, abs=1e-4)

    def test_identical_components_collapse(self, rng):
        y = rng.normal(size=(5, 2))
        mu, sigma = rng.normal(size=(1, 2)), rng.uniform(0.5, 2.0, size=(1, 2))
        single = mixture_log_lik(y, [1.0], mu, sigma)
        double = mixture_log_lik(y, [0.5, 0.5], np.repeat(mu, 2, axis=0), np.repeat(sigma, 2, axis=0))
        assert_allclose(double, single)
        assert_allclose(single, stats.norm.logpdf(y, mu, sigma).sum(axis=1))

    def test_permutation_invariant(self, rng):
        y = rng.normal(size=(4, 3))
        pi = stick_break(rng.uniform(0.1, 0.9, size=4))
        mu, sigma = rng.normal(size=(5, 3)), rng.uniform(0.5, 2.0, size=(5, 3))
        order = rng.permutation(5)
        assert_allclose(mixture_log_lik(y, pi, mu, sigma), mixture_log_lik(y, pi[order], mu[order], sigma[order]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mixture_log_lik(np.zeros(2), [1.0], [[0.0]], [[1.0]])


class TestELBO:
    def test_point_mass_at_prior_values(self):
        K, p, tiny = 3, 2, 1e-6
        config = DPGMMConfig(truncation=K)
        params = {
            "alpha.loc": np.zeros(1), "nu.loc": np.zeros(K - 1),
            "mu.loc": np.zeros((K, p)), "sigma.loc": np.zeros((K, p)),
        }
        for var, shape in (("alpha", (1,)), ("nu", (K - 1,)), ("mu", (K, p)), ("sigma", (K, p))):
            params[f"{var}.log_scale"] = np.full(shape, math.log(tiny))
        posterior = VariationalPosterior(config, p, params, np.zeros(p), np.ones(p))

        # alpha = 1, nu = 1/2, mu = 0, sigma = 1, each with the log-Jacobian of its transform
        log_prior = -1.0
        log_prior += (K - 1) * (-2.0 * math.log(2.0))
        log_prior += K * p * (-0.5 * LOG_2PI)
        log_prior += K * p * (math.log(2.0) - 0.5 * LOG_2PI - 0.5)
        n_vars = 1 + (K - 1) + 2 * K * p
        entropy = n_vars * (math.log(tiny) + 0.5 * (1.0 + LOG_2PI))
        value = elbo(posterior, np.zeros((0, p)), mc_samples=16, rng=np.random.default_rng(0))
        assert value == pytest.approx(log_prior + entropy, abs=1e-3)

    def test_gradient_matches_finite_differences(self, rng, fd, rel_err):
        data = rng.normal(size=(6, 2))
        posterior = init_posterior(data, DPGMMConfig(truncation=3), rng)
        params = {k: v + rng.normal(scale=0.1, size=v.shape) for k, v in posterior.params.items()}
        posterior = _with_params(posterior, params)
        noise = draw_noise(rng, 3, 2, 200)
        _, analytic = elbo_grad(posterior, data, noise)
        numeric = fd(lambda a: elbo(_with_params(posterior, a), data, 200, noise=noise), params, eps=1e-6)
        for name in params:
            assert rel_err(analytic[name], numeric[name]) < 1e-3, name

    def test_bounded_by_conjugate_evidence(self):
        # K = 1, p = 1: the evidence reduces to a 2-d integral over (mu, sigma)
        data = np.array([[0.4], [-0.3], [1.1], [0.2], [0.7]])
        mu = np.linspace(-6.0, 6.0, 1201)[:, None]
        sigma = np.linspace(1e-3, 6.0, 1200)[None, :]
        log_f = (stats.norm.logpdf(mu) + stats.halfnorm.logpdf(sigma)
                 + stats.norm.logpdf(data[:, 0][:, None, None], mu, sigma).sum(axis=0))
        log_evidence = special.logsumexp(log_f) + math.log((mu[1, 0] - mu[0, 0]) * (sigma[0, 1] - sigma[0, 0]))

        config = DPGMMConfig(truncation=1, lr=0.01, steps=1500, mc_samples=8, standardize=False, seed=2)
        posterior = fit_advi(data, config)
        estimates = [elbo(posterior, data, 500, rng=np.random.default_rng(s)) for s in range(8)]
        mean, se = np.mean(estimates), np.std(estimates) / math.sqrt(len(estimates))
        assert mean <= log_evidence + 3 * se + 1e-3
        assert mean > log_evidence - 1.0

    def test_rejects_zero_samples(self, rng):
        posterior = init_posterior(rng.normal(size=(4, 1)), DPGMMConfig(truncation=2), rng)
        with pytest.raises(ValueError):
            elbo(posterior, np.zeros((4, 1)), mc_samples=0)


class TestFit:
    def test_seeded_fit_is_reproducible(self, rng):
        data = rng.normal(size=(60, 2))
        config = DPGMMConfig(truncation=4, steps=30, batch_size=32, seed=3)
        a, b = fit_advi(data, config), fit_advi(data, config)
        assert a.elbo_trace == b.elbo_trace
        assert len(a.elbo_trace) == 30

    def test_tight_cluster_uses_few_components(self, rng):
        data = rng.normal(scale=0.01, size=(200, 2)) + np.array([3.0, -1.0])
        posterior = fit_advi(data, DPGMMConfig(truncation=10, steps=300, batch_size=100, seed=1))
        assert effective_components(posterior) <= 3
        assert_allclose(posterior.component_means()[np.argmax(posterior_mean_weights(posterior))],
                        [3.0, -1.0], atol=0.05)

    def test_empty_data(self):
        with pytest.raises(ValueError):
            fit_advi(np.zeros((0, 2)), DPGMMConfig(truncation=2, steps=1))

    def test_save_load(self, rng, tmp_path):
        data = rng.normal(size=(30, 2))
        posterior = fit_advi(data, DPGMMConfig(truncation=3, steps=5, seed=0))
        posterior.save(tmp_path / "q.npz")
        loaded = VariationalPosterior.load(tmp_path / "q.npz")
        assert loaded.config == posterior.config and loaded.elbo_trace == posterior.elbo_trace
        assert_allclose(posterior_log_lik(data, loaded, 64, np.random.default_rng(1)),
                        posterior_log_lik(data, posterior, 64, np.random.default_rng(1)))

    def test_truncation_sweep(self, rng):
        data = rng.normal(size=(40, 1))
        results = fit_truncation_sweep(data, DPGMMConfig(steps=10, seed=0), truncations=(2, 3))
        assert sorted(results) == [2, 3]
        assert results[3][0].truncation == 3
        assert np.isfinite(results[2][1])

    @pytest.mark.slow
    def test_two_separated_clusters(self):
        rng = np.random.default_rng(17)
        data = np.concatenate([rng.normal(-5.0, 0.5, size=(200, 2)), rng.normal(5.0, 0.5, size=(200, 2))])
        posterior = fit_advi(data, DPGMMConfig(truncation=3, lr=0.02, steps=2000, batch_size=200, seed=5))
        weights = posterior_mean_weights(posterior)
        top = np.argsort(weights)[::-1][:2]
        assert weights[top].sum() > 0.9
        centres = posterior.component_means()[top]
        assert np.min(np.linalg.norm(centres - [-5.0, -5.0], axis=1)) < 1.0
        assert np.min(np.linalg.norm(centres - [5.0, 5.0], axis=1)) < 1.0


class TestPredictive:
    def test_draws_live_on_the_simplex(self, rng):
        posterior = init_posterior(rng.normal(size=(20, 2)), DPGMMConfig(truncation=5), rng)
        draws = posterior_draws(posterior, 100, rng)
        assert draws.weights.shape == (100, 5) and draws.means.shape == (100, 5, 2)
        assert_allclose(draws.weights.sum(axis=1), 1.0)
        assert np.all(draws.weights >= 0.0) and np.all(draws.stds > 0.0)

    def test_single_draw_is_that_mixture(self, rng):
        posterior = init_posterior(rng.normal(size=(20, 2)), DPGMMConfig(truncation=4), rng)
        draws = posterior_draws(posterior, 1, rng)
        y = rng.normal(size=(6, 2))
        expected = mixture_log_lik(y, draws.weights[0], draws.means[0], draws.stds[0])
        assert_allclose(posterior_log_lik(y, draws), expected)

    def test_average_over_draws(self, rng):
        weights = np.array([[1.0], [1.0]])
        draws = MixtureDensityDraws(weights, np.array([[[0.0]], [[2.0]]]), np.ones((2, 1, 1)))
        expected = math.log(0.5 * stats.norm.pdf(1.0, 0.0, 1.0) + 0.5 * stats.norm.pdf(1.0, 2.0, 1.0))
        assert posterior_log_lik(np.array([1.0]), draws) == pytest.approx(expected)

    def test_original_scale(self, rng):
        # standardization must not leak into the reported likelihood
        data = rng.normal(size=(50, 1)) * 10.0 + 100.0
        posterior = init_posterior(data, DPGMMConfig(truncation=2), rng, np.array([100.0]), np.array([10.0]))
        draws = posterior_draws(posterior, 5, rng)
        assert np.all(np.abs(draws.means - 100.0) < 60.0)
        assert np.all(draws.stds > 0.5)

    def test_dimension_mismatch(self, rng):
        posterior = init_posterior(rng.normal(size=(20, 2)), DPGMMConfig(truncation=2), rng)
        with pytest.raises(ShapeError):
            posterior_log_lik(np.zeros((3, 3)), posterior, 4, rng)

    def test_rejects_zero_draws(self, rng):
        posterior = init_posterior(rng.normal(size=(20, 2)), DPGMMConfig(truncation=2), rng)
        with pytest.raises(ValueError):
            posterior_draws(posterior, 0, rng)
