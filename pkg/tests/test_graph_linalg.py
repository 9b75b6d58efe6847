import numpy as np
import pytest

from interacting_bridges.errors import DimensionError, GraphError, ParameterError, SingularMatrixError
from interacting_bridges.graph_linalg import (
    BetaPoint,
    ConductanceMatrix,
    ModelParams,
    TimeVector,
    as_time_array,
    check_mixture_identities,
    det_k_t,
    h_beta,
    is_positive_definite,
    k_t,
    mixture_residuals,
    mixture_transforms,
    solve_checked,
    symmetrized_k,
)
from interacting_bridges.verify_harness import random_admissible_instance


class TestConductanceMatrix:

    def test_rejects_asymmetric(self):
        with pytest.raises(GraphError, match="W must be symmetric"):
            ConductanceMatrix(np.array([[0.0, 1.0], [0.5, 0.0]]))

    def test_rejects_negative_entries(self):
        with pytest.raises(GraphError, match="nonnegative"):
            ConductanceMatrix(np.array([[0.0, -1.0], [-1.0, 0.0]]))

    def test_rejects_disconnected_graph(self):
        with pytest.raises(GraphError, match="connected"):
            ConductanceMatrix(np.zeros((2, 2)))

    def test_rejects_non_square(self):
        with pytest.raises(DimensionError):
            ConductanceMatrix(np.zeros((2, 3)))

    def test_self_loop_allowed(self):
        W = ConductanceMatrix(np.array([[0.3, 1.0], [1.0, 0.0]]))
        assert W.n == 2
        assert not W.is_zero

    def test_single_vertex_zero(self):
        assert ConductanceMatrix(np.zeros((1, 1))).is_zero

    def test_from_edges_is_symmetric(self):
        W = ConductanceMatrix.from_edges(3, [[0, 1, 0.5], [2, 1, 2.0]])
        np.testing.assert_array_equal(W.W, W.W.T)
        assert W.W[1, 2] == 2.0
        assert W.edges() == [[0, 1, 0.5], [1, 2, 2.0]]

    def test_from_edges_out_of_range(self):
        with pytest.raises(GraphError):
            ConductanceMatrix.from_edges(2, [[0, 2, 1.0]])

    def test_matrix_is_read_only(self):
        W = ConductanceMatrix.from_edges(2, [[0, 1, 1.0]])
        with pytest.raises(ValueError):
            W.W[0, 1] = 3.0


class TestModelParams:

    def test_dict_round_trip(self, three_vertex_path):
        again = ModelParams.from_dict(three_vertex_path.to_dict())
        np.testing.assert_array_equal(again.weights, three_vertex_path.weights)
        np.testing.assert_array_equal(again.theta, three_vertex_path.theta)
        np.testing.assert_array_equal(again.eta, three_vertex_path.eta)

    def test_unknown_key(self):
        with pytest.raises(ParameterError, match="unknown model key"):
            ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [1], 'eta': [1], 'mu': 3})

    def test_theta_must_be_positive(self):
        with pytest.raises(ParameterError):
            ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [0.0], 'eta': [1.0]})

    def test_eta_may_vanish(self):
        params = ModelParams.from_dict({'n': 1, 'edges': [], 'theta': [1.0], 'eta': [0.0]})
        assert params.eta[0] == 0.0

    def test_theta_length(self):
        with pytest.raises(DimensionError):
            ModelParams.from_dict({'n': 2, 'edges': [[0, 1, 1.0]], 'theta': [1.0], 'eta': [1.0, 1.0]})


class TestTimeVector:

    def test_negative_rejected(self):
        with pytest.raises(ParameterError):
            TimeVector(np.array([0.1, -0.2]))

    def test_clamp(self):
        clamped = TimeVector(np.array([1.0, 3.0])).clamp(np.array([2.0, np.inf]))
        np.testing.assert_array_equal(clamped.t, [1.0, 3.0])

    def test_infinite_entries_need_clamping(self):
        with pytest.raises(ParameterError):
            as_time_array([0.1, np.inf], 2)
        assert np.isinf(as_time_array([0.1, np.inf], 2, allow_inf=True)[1])

    def test_length_checked(self):
        with pytest.raises(DimensionError):
            as_time_array([0.1], 2)


class TestMatrices:

    def test_h_beta(self, two_vertex):
        np.testing.assert_array_equal(h_beta(two_vertex, [1.0, 2.0]), [[2.0, -1.0], [-1.0, 4.0]])

    def test_k_t_not_symmetric(self, two_vertex):
        K = k_t(two_vertex, [0.1, 0.3])
        np.testing.assert_allclose(K, [[1.0, -0.1], [-0.3, 1.0]])

    def test_det_k_t(self, three_vertex_path):
        t = [0.2, 0.4, 0.7]
        assert det_k_t(three_vertex_path, t) == pytest.approx(np.linalg.det(k_t(three_vertex_path, t)), rel=1e-12)

    def test_symmetrized_k_same_determinant(self, three_vertex_path):
        t = [0.2, 0.4, 0.7]
        assert np.linalg.det(symmetrized_k(three_vertex_path, t)) == pytest.approx(det_k_t(three_vertex_path, t))

    def test_is_positive_definite(self):
        assert is_positive_definite(np.array([[2.0, -1.0], [-1.0, 2.0]]))
        assert not is_positive_definite(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_is_positive_definite_needs_symmetric(self):
        with pytest.raises(ParameterError):
            is_positive_definite(np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(DimensionError):
            is_positive_definite(np.ones((2, 3)))

    def test_solve_checked_singular(self):
        with pytest.raises(SingularMatrixError):
            solve_checked(np.ones((2, 2)), np.ones(2), "ones")

    def test_beta_point_outside_support(self, two_vertex):
        with pytest.raises(ParameterError, match="not positive definite"):
            BetaPoint.from_beta(two_vertex, [0.25, 0.25])

    def test_beta_point_log_det(self, two_vertex):
        point = BetaPoint.from_beta(two_vertex, [1.0, 1.5])
        assert point.log_det() == pytest.approx(np.log(np.linalg.det(point.h_beta)))
        np.testing.assert_allclose(point.h_beta @ point.solve([1.0, 2.0]), [1.0, 2.0])


class TestMixtureIdentities:

    def test_random_instances(self):
        gen = np.random.default_rng(3)
        for k in range(1000):
            params, beta, T = random_admissible_instance(gen, 1 + k % 3)
            assert check_mixture_identities(params, beta, T).max < 1e-9

    def test_decoupled_vertex_is_exact(self, one_vertex):
        residuals = check_mixture_identities(one_vertex, [0.8], [0.3])
        assert residuals.max <= 1e-14

    def test_clock_outside_range(self, two_vertex):
        with pytest.raises(ParameterError):
            check_mixture_identities(two_vertex, [1.0, 1.0], [0.6, 0.1])
        with pytest.raises(ParameterError):
            check_mixture_identities(two_vertex, [1.0, 1.0], [0.0, 0.1])

    def test_perturbed_drift_is_detected(self):
        gen = np.random.default_rng(11)
        for k in range(50):
            params, beta, T = random_admissible_instance(gen, 1 + k % 3)
            W_tilde, eta_tilde = mixture_transforms(params, T)
            assert mixture_residuals(params, beta, T, W_tilde, eta_tilde).drift < 1e-9
            shifted = eta_tilde + 1e-3 * gen.standard_normal(params.n)
            residuals = mixture_residuals(params, beta, T, W_tilde, shifted)
            assert residuals.drift > 1e-6
            assert residuals.quadratic_form > 0.0

    def test_drift_matches_h_solve(self, three_vertex_path):
        beta = np.array([1.5, 2.0, 1.5])
        T = np.array([0.1, 0.2, 0.15])
        _, eta_tilde = mixture_transforms(three_vertex_path, T)
        H_u = np.diag(1.0 / T) - three_vertex_path.weights
        np.testing.assert_allclose(eta_tilde, np.linalg.solve(H_u, three_vertex_path.eta) / T, rtol=1e-12)
        assert check_mixture_identities(three_vertex_path, beta, T).drift < 1e-12
