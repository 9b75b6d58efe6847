import numpy as np
import pytest
from scipy import stats

from interacting_bridges.errors import DimensionError, ParameterError, UnabsorbedError
from interacting_bridges.graph_linalg import k_t
from interacting_bridges.parallel import chunk_counts
from interacting_bridges.rand_dist import RngStream, ig_distribution
from interacting_bridges.sde_engine import (
    MultiPath,
    RestartParams,
    bessel_bridge_path,
    continue_from_restart,
    default_dt,
    default_t_max,
    detect_hitting,
    lamperti_clock,
    lamperti_transform,
    opposite_drift_residual,
    psi,
    refine_clock_to_absorption,
    restart_params,
    restart_params_batch,
    sample_time_changed_bridge,
    simulate_hitting_times,
    simulate_rho,
    simulate_rho_batch,
    simulate_x,
    simulate_x_batch,
)


class TestDefaults:

    def test_default_dt(self, two_vertex):
        assert default_dt(two_vertex) == pytest.approx(1e-4)

    def test_default_t_max(self, two_vertex, one_vertex):
        assert default_t_max(two_vertex) == pytest.approx(25.0)
        assert default_t_max(one_vertex) == pytest.approx(50.0)

    def test_default_t_max_heavy_tail(self):
        from interacting_bridges.graph_linalg import ModelParams
        params = ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [2.0], 'eta': [0.0]})
        assert default_t_max(params) == pytest.approx(800.0)


class TestStepPrimitives:

    def test_psi_at_time_zero(self, two_vertex):
        np.testing.assert_allclose(psi(two_vertex, [0.5, 0.7], [0.0, 0.0]), [0.5, 0.7])

    def test_psi_solves_k(self, two_vertex):
        x, t = np.array([0.5, 0.7]), np.array([0.2, 0.4])
        value = psi(two_vertex, x, t)
        np.testing.assert_allclose(k_t(two_vertex, t) @ value, x + t * two_vertex.eta)

    def test_psi_shape(self, two_vertex):
        with pytest.raises(DimensionError):
            psi(two_vertex, [1.0], [0.0, 0.0])

    def test_negative_endpoint_is_interpolated(self):
        hit, fraction = detect_hitting(1.0, -1.0, 0.01, RngStream(1))
        assert hit is True
        assert fraction == pytest.approx(0.5)

    def test_far_from_zero_no_hit(self):
        hit, fraction = detect_hitting(2.0, 2.0, 1e-4, RngStream(1))
        assert hit is False
        assert fraction == 0.0

    def test_bridge_crossing_fraction_in_step(self):
        hit, fraction = detect_hitting(np.full(2000, 0.01), np.full(2000, 0.01), 1e-3, RngStream(2))
        # crossing probability exp(-0.2)
        assert hit.mean() == pytest.approx(np.exp(-0.2), abs=0.05)
        assert np.all((fraction[hit] > 0) & (fraction[hit] < 1))
        assert np.all(fraction[~hit] == 0)

    def test_requires_positive_start(self):
        with pytest.raises(ParameterError):
            detect_hitting(0.0, 1.0, 0.01, RngStream(1))


class TestXEngine:

    def test_same_stream_same_times(self, two_vertex):
        a = simulate_x_batch(two_vertex, 20, 1e-3, 25.0, RngStream(3))
        b = simulate_x_batch(two_vertex, 20, 1e-3, 25.0, RngStream(3))
        np.testing.assert_array_equal(a.hitting_times, b.hitting_times)

    def test_thread_count_does_not_change_results(self, one_vertex):
        one = simulate_hitting_times(one_vertex, 200, 1e-3, 20.0, 11, chunk_size=50, threads=1)
        two = simulate_hitting_times(one_vertex, 200, 1e-3, 20.0, 11, chunk_size=50, threads=2)
        np.testing.assert_array_equal(one.hitting_times, two.hitting_times)

    def test_chunk_partition(self):
        assert chunk_counts(12, 5) == [5, 5, 2]
        with pytest.raises(ParameterError):
            chunk_counts(0, 5)

    def test_decoupled_vertex_hits_with_inverse_gaussian_law(self, one_vertex):
        batch = simulate_hitting_times(one_vertex, 2000, 1e-3, 20.0, 5, chunk_size=500)
        times = batch.hitting_times[:, 0]
        times = times[np.isfinite(times)]
        assert times.size >= 1990
        assert stats.kstest(times, ig_distribution(1.0, 1.0).cdf).pvalue > 1e-4

    def test_single_path(self, two_vertex):
        path = simulate_x(two_vertex, 1e-3, 25.0, RngStream(4))
        assert isinstance(path, MultiPath)
        np.testing.assert_array_equal(path.values[0], two_vertex.theta)
        if path.is_absorbed:
            for i in range(2):
                assert path.value_at(i, path.absorption[i]) == 0.0
                before = path.grid < path.absorption[i]
                assert np.all(path.values[before, i][:-1] >= 0)

    def test_checkpoint_at_time_zero(self, two_vertex):
        batch = simulate_x_batch(two_vertex, 5, 1e-3, 25.0, RngStream(5), t_checkpoints=(0.0, 0.1))
        np.testing.assert_array_equal(batch.x_at_t[:, 0, :], np.ones((5, 2)))

    def test_clock_checkpoints_match_lamperti_transform(self, two_vertex):
        batch = simulate_x_batch(two_vertex, 10, 1e-3, 25.0, RngStream(6), keep_paths=True, u_checkpoints=(0.5,))
        checked = 0
        for r in range(batch.n_replicas):
            path = batch.path(r)
            if batch.failed[r] or not path.is_absorbed:
                continue
            tc = lamperti_transform(path, np.array([0.0, 0.5]))
            np.testing.assert_allclose(tc.rho[1], batch.rho_at_u[r, 0], rtol=1e-7, atol=1e-9, equal_nan=True)
            np.testing.assert_allclose(tc.T[1], batch.t_at_u[r, 0], rtol=1e-7, atol=1e-9, equal_nan=True)
            np.testing.assert_allclose(tc.rho[0], np.log(two_vertex.theta))
            checked += 1
        assert checked > 0


class TestLamperti:

    def test_unabsorbed_path_rejected(self):
        path = MultiPath(np.array([0.0, 0.1, 0.2]), np.array([[1.0], [0.9], [0.8]]), np.array([np.inf]))
        with pytest.raises(UnabsorbedError):
            lamperti_transform(path, [0.0, 0.1])

    def test_clock_is_increasing(self):
        path = bessel_bridge_path(1.0, 1.0, np.linspace(0.0, 1.0, 501), RngStream(7))
        times, clock = lamperti_clock(path, 0)
        assert clock[0] == 0.0
        assert np.all(np.diff(clock) > 0)
        assert times[-1] < 1.0

    def test_refined_clock_grows_toward_absorption(self):
        path = bessel_bridge_path(1.0, 1.0, np.linspace(0.0, 1.0, 1001), RngStream(8))
        eps, clock = refine_clock_to_absorption(path, 0, RngStream(9), halvings=40)
        assert eps.size == clock.size == 41
        assert np.all(np.diff(eps) < 0)
        assert np.all(np.diff(clock) >= 0)
        assert clock[-1] > clock[0]

    def test_refined_clock_needs_absorption(self):
        path = MultiPath(np.array([0.0, 0.1]), np.array([[1.0], [0.9]]), np.array([np.inf]))
        with pytest.raises(UnabsorbedError):
            refine_clock_to_absorption(path, 0, RngStream(9))


class TestRhoEngine:

    def test_starts_at_log_theta(self, three_vertex_path):
        batch = simulate_rho_batch(three_vertex_path, 4, 1e-3, 0.5, RngStream(10), keep_paths=True)
        np.testing.assert_allclose(batch.rho_paths[0], np.tile(np.log(three_vertex_path.theta), (4, 1)))
        np.testing.assert_array_equal(batch.T_paths[0], np.zeros((4, 3)))
        for r in np.flatnonzero(~batch.failed):
            assert np.all(np.diff(batch.T_paths[:, r, :], axis=0) >= 0)

    def test_reproducible(self, two_vertex):
        a = simulate_rho(two_vertex, 1e-3, 0.2, RngStream(11))
        b = simulate_rho(two_vertex, 1e-3, 0.2, RngStream(11))
        np.testing.assert_array_equal(a.rho, b.rho)
        np.testing.assert_array_equal(a.T, b.T)

    def test_checkpoint_outside_horizon(self, two_vertex):
        with pytest.raises(ParameterError):
            simulate_rho_batch(two_vertex, 2, 1e-3, 0.5, RngStream(12), u_checkpoints=(1.0,))

    def test_bad_step(self, two_vertex):
        with pytest.raises(ParameterError):
            simulate_rho_batch(two_vertex, 2, -1e-3, 0.5, RngStream(12))


class TestTimeChangedBridge:

    def test_residual_is_driving_brownian_motion(self):
        tc = sample_time_changed_bridge(1.0, 1.0, 1e-3, 1.0, RngStream(13))
        residual = opposite_drift_residual(tc, [1.0], [1.0])[:, 0]
        brownian = np.concatenate([[0.0], np.cumsum(tc.driving_increments[:, 0])])
        np.testing.assert_allclose(residual, brownian, atol=1e-9)
        assert residual[0] == 0.0

    def test_clock_stays_below_hitting_time(self):
        tc = sample_time_changed_bridge(2.0, 0.5, 1e-3, 2.0, RngStream(14))
        assert np.all(np.diff(tc.T[:, 0]) > 0)
        assert np.all(tc.T[:, 0] < 0.5)

    def test_increment_shape(self):
        with pytest.raises(DimensionError):
            sample_time_changed_bridge(1.0, 1.0, 1e-3, 1.0, RngStream(15), brownian_increments=np.zeros(3))

    def test_residual_undefined_past_hitting_time(self):
        tc = sample_time_changed_bridge(1.0, 1.0, 1e-3, 1.0, RngStream(16))
        with pytest.raises(ParameterError):
            opposite_drift_residual(tc, [1e-6], [1.0])


class TestRestart:

    def test_restart_at_time_zero(self, two_vertex):
        path = simulate_x(two_vertex, 1e-3, 25.0, RngStream(17))
        restart = restart_params(two_vertex, path, [0.0, 0.0])
        np.testing.assert_allclose(restart.W_tilde, two_vertex.weights)
        np.testing.assert_allclose(restart.eta_tilde, two_vertex.eta)
        np.testing.assert_allclose(restart.X_T, two_vertex.theta)

    def test_batch_matches_single(self, two_vertex):
        x_T = np.array([[0.8, 0.6], [0.3, 0.0]])
        T = np.array([[0.05, 0.08], [0.05, 0.02]])
        batch = restart_params_batch(two_vertex, x_T, T)
        for r in range(2):
            K = k_t(two_vertex, T[r])
            W_tilde = two_vertex.weights @ np.linalg.inv(K)
            np.testing.assert_allclose(batch.W_tilde[r], W_tilde, rtol=1e-12)
            np.testing.assert_allclose(batch.eta_tilde[r], two_vertex.eta + W_tilde @ (T[r] * two_vertex.eta))

    def test_batch_shapes_checked(self, two_vertex):
        with pytest.raises(DimensionError):
            restart_params_batch(two_vertex, np.ones((2, 2)), np.zeros((3, 2)))

    def test_absorbed_coordinate_stays_absorbed(self, two_vertex):
        restart = RestartParams(W_tilde=np.asarray(two_vertex.weights), X_T=np.array([0.0, 1.0]),
                                eta_tilde=np.asarray(two_vertex.eta), T_clamped=np.array([0.1, 0.05]))
        batch = continue_from_restart(restart, 1e-3, 25.0, RngStream(18), n_replicas=5)
        np.testing.assert_array_equal(batch.hitting_times[:, 0], np.zeros(5))
        assert np.all(batch.hitting_times[~batch.failed, 1] > 0)

    def test_negative_position_rejected(self, two_vertex):
        restart = RestartParams(W_tilde=np.asarray(two_vertex.weights), X_T=np.array([-0.1, 1.0]),
                                eta_tilde=np.asarray(two_vertex.eta), T_clamped=np.zeros(2))
        with pytest.raises(ParameterError):
            continue_from_restart(restart, 1e-3, 1.0, RngStream(19))
