import math

import numpy as np
import pytest

from interacting_bridges.beta_potential import (
    McmcConfig,
    NuDensityParams,
    beta_from_hitting,
    exp_martingale_check,
    girsanov_density,
    girsanov_density_batch,
    girsanov_density_path,
    girsanov_density_quadrature,
    girsanov_martingale_check,
    marginal_ig_params,
    mcmc_start,
    nu_log_density,
    quadrature_normalization,
    reference_rho_paths,
    sample_nu_chains,
    sample_nu_mcmc,
)
from interacting_bridges.errors import DimensionError, ParameterError, QuadratureError
from interacting_bridges.graph_linalg import ModelParams, is_positive_definite, h_beta
from interacting_bridges.rand_dist import RngStream, ig_density
from interacting_bridges.sde_engine import TimeChangedPath, sample_time_changed_bridge


def small_mcmc(n_samples, stream_id=0, **overrides):
    values = {'burn_in': 300, 'thinning': 5, 'proposal_scale': 0.5, 'walkers': 20}
    values.update(overrides)
    return McmcConfig(n_samples=n_samples, seed=RngStream(2024, stream_id), **values)


class TestDensity:

    def test_outside_support(self, two_vertex):
        assert nu_log_density(two_vertex, [0.25, 0.25]) == -math.inf
        assert nu_log_density(two_vertex, [np.inf, 1.0]) == -math.inf

    def test_wrapped_parameters(self, two_vertex):
        wrapped = NuDensityParams(two_vertex)
        assert wrapped.n == 2
        assert nu_log_density(wrapped, [0.8, 0.9]) == nu_log_density(two_vertex, [0.8, 0.9])
        with pytest.raises(ParameterError):
            NuDensityParams({'n': 2})

    def test_shape_checked(self, two_vertex):
        with pytest.raises(DimensionError):
            nu_log_density(two_vertex, [1.0])

    def test_single_vertex_is_transformed_hitting_density(self):
        params = ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [1.3], 'eta': [0.7]})
        for beta in (0.2, 0.9, 3.0):
            t = 1.0 / (2.0 * beta)
            expected = ig_density(t, 1.3, 0.7) / (2.0 * beta ** 2)
            assert math.exp(nu_log_density(params, [beta])) == pytest.approx(expected, rel=1e-12)

    def test_single_vertex_mass(self, one_vertex):
        mass, _ = quadrature_normalization(one_vertex)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_two_vertex_mass(self, two_vertex):
        mass, _ = quadrature_normalization(two_vertex)
        assert mass == pytest.approx(1.0, abs=1e-3)

    def test_quadrature_dimension_limit(self):
        params = ModelParams.from_dict({'n': 4, 'edges': [[0, 1, 1.0], [1, 2, 1.0], [2, 3, 1.0]],
                                        'theta': [1.0] * 4, 'eta': [1.0] * 4})
        with pytest.raises(QuadratureError):
            quadrature_normalization(params)


class TestMarginals:

    def test_inverse_gaussian_marginal(self, two_vertex):
        law = marginal_ig_params(two_vertex, 0)
        assert law.kind == "inverse_gaussian"
        assert law.as_tuple() == pytest.approx((0.5, 1.0))

    def test_reciprocal_gamma_marginal(self):
        params = ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [2.0], 'eta': [0.0]})
        law = marginal_ig_params(params, 0)
        assert law.kind == "reciprocal_gamma"
        assert math.isinf(law.mu)
        assert law.distribution().cdf(4.0) == pytest.approx(0.3173105, rel=1e-6)

    def test_vertex_range(self, two_vertex):
        with pytest.raises(DimensionError):
            marginal_ig_params(two_vertex, 2)

    def test_beta_from_hitting(self):
        np.testing.assert_allclose(beta_from_hitting([[0.5, 0.25]]), [[1.0, 2.0]])
        with pytest.raises(ParameterError):
            beta_from_hitting([np.inf, 1.0])


class TestMcmc:

    def test_start_is_in_support(self, three_vertex_path):
        beta = mcmc_start(three_vertex_path)
        assert is_positive_definite(h_beta(three_vertex_path, beta))

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            McmcConfig(n_samples=10, burn_in=0, thinning=0, proposal_scale=0.5, seed=RngStream(1))
        with pytest.raises(ParameterError):
            McmcConfig(n_samples=10, burn_in=0, thinning=1, proposal_scale=0.0, seed=RngStream(1))

    def test_config_defaults(self):
        cfg = McmcConfig.from_defaults(100, 7, walkers=4)
        assert cfg.walkers == 4
        assert cfg.seed == RngStream(7)

    def test_samples_stay_in_support(self, two_vertex):
        result = sample_nu_mcmc(two_vertex, small_mcmc(400))
        assert result.samples.shape == (400, 2)
        for beta in result.samples:
            assert is_positive_definite(h_beta(two_vertex, beta))

    def test_reproducible(self, two_vertex):
        a = sample_nu_mcmc(two_vertex, small_mcmc(100))
        b = sample_nu_mcmc(two_vertex, small_mcmc(100))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_single_vertex_mean(self, one_vertex):
        result = sample_nu_mcmc(one_vertex, small_mcmc(4000, walkers=50))
        # 1/(2 beta) is IG(1, 1)
        assert np.mean(0.5 / result.samples[:, 0]) == pytest.approx(1.0, rel=0.1)

    def test_chains_use_distinct_streams(self, two_vertex):
        chains = sample_nu_chains(two_vertex, small_mcmc(50), 2)
        assert [c.seed.stream_id for c in chains] == [0, 1]
        assert not np.array_equal(chains[0].samples, chains[1].samples)


class TestGirsanov:

    def test_density_is_one_at_start(self, two_vertex):
        D = girsanov_density_batch(two_vertex, np.log(two_vertex.theta)[None, :], np.zeros((1, 2)), 0.0)
        assert D[0] == pytest.approx(1.0, abs=1e-12)

    def test_closed_form_matches_mixture_integral(self):
        params = ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [1.0], 'eta': [1.0]})
        tc = TimeChangedPath(np.array([0.0, 0.5]), np.array([[0.0], [0.1]]), np.array([[0.0], [0.2]]))
        closed = girsanov_density(params, tc, 0.5)
        integral, _ = girsanov_density_quadrature(params, tc, 0.5)
        assert integral == pytest.approx(closed, rel=1e-6)

    def test_density_along_path(self):
        params = ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [1.0], 'eta': [1.0]})
        tc = TimeChangedPath(np.array([0.0, 0.5]), np.array([[0.0], [0.1]]), np.array([[0.0], [0.2]]))
        path = girsanov_density_path(params, tc)
        assert path[0] == pytest.approx(1.0, abs=1e-12)
        assert path[1] == pytest.approx(girsanov_density(params, tc, 0.5), rel=1e-12)

    def test_quadrature_needs_positive_clock(self, one_vertex):
        tc = TimeChangedPath(np.array([0.0, 0.5]), np.array([[0.0], [0.1]]), np.array([[0.0], [0.2]]))
        with pytest.raises(ParameterError):
            girsanov_density_quadrature(one_vertex, tc, 0.0)

    def test_u_off_grid(self, one_vertex):
        tc = TimeChangedPath(np.array([0.0, 0.5]), np.array([[0.0], [0.1]]), np.array([[0.0], [0.2]]))
        with pytest.raises(ParameterError):
            girsanov_density(one_vertex, tc, 0.3)

    def test_exp_martingale_along_bridge(self):
        beta = 0.5
        tc = sample_time_changed_bridge(1.0, 1.0 / (2.0 * beta), 1e-4, 1.0, RngStream(21))
        assert exp_martingale_check(tc, beta, 1.0) < 0.05

    def test_exp_martingale_inconsistent_beta(self):
        tc = sample_time_changed_bridge(1.0, 1.0, 1e-3, 1.0, RngStream(22))
        with pytest.raises(ParameterError):
            exp_martingale_check(tc, 5.0, 1.0)

    def test_reference_paths(self, two_vertex):
        batch = reference_rho_paths(two_vertex, 3, 1e-3, 0.1, RngStream(23))
        assert batch.rho_paths.shape == (101, 3, 2)
        np.testing.assert_allclose(np.diff(batch.rho_paths, axis=0), batch.increments)

    def test_density_tracks_stochastic_exponential(self, two_vertex):
        batch = reference_rho_paths(two_vertex, 5, 1e-4, 0.5, RngStream(24))
        discrepancies = [girsanov_martingale_check(two_vertex, batch.path(r)) for r in range(5)]
        assert np.median(discrepancies) < 0.1
