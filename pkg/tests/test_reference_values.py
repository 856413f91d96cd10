"""Hand-computed values for small inputs, one class per module."""

import math

import numpy as np
import pytest

from iblab import harness, optimizers, oracles, problems
from iblab.geometry import Entropy, Norm, Quadratic, SquaredEuclidean
from iblab.optimizers import OptimizerConfig, init_state
from iblab.problems import Dataset, MatrixDataset


def _example1():
    return problems.builtin_dataset("example1")


def _identity_matrix_data():
    return MatrixDataset([np.eye(2)], [1.0])


class TestLossValues:
    def test_losses(self):
        assert problems.loss_value("squared", 2.0, 1.0) == 1.0
        assert problems.loss_value("exponential", 0.0, 1.0) == 1.0
        assert problems.loss_value("logistic", 0.0, 1.0) == pytest.approx(0.6931, abs=1e-4)

    def test_derivatives(self):
        assert problems.loss_derivative("squared", 3.0, 1.0) == 4.0
        assert problems.loss_derivative("exponential", 0.0, 1.0) == -1.0

    def test_objective(self):
        assert problems.objective(_example1(), "squared", np.array([1.0, 1.0])) == 4.0
        assert problems.objective(_example1(), "squared", np.array([0.2, 0.4])) == pytest.approx(0.0, abs=1e-30)
        data = problems.random_separable(0, 7, 2)
        assert problems.objective(data, "exponential", np.zeros(2)) == 7.0

    def test_gradient(self):
        assert np.array_equal(problems.gradient(_example1(), "squared", np.array([1.0, 1.0])), [4.0, 8.0])
        assert np.array_equal(problems.gradient(_example1(), "squared", np.array([0.2, 0.4])), [0.0, 0.0])

    def test_matrix_objective(self):
        data = _identity_matrix_data()
        assert problems.matrix_objective(data, "exponential", np.eye(2)) == pytest.approx(math.exp(-2))
        assert np.allclose(problems.matrix_gradient(data, "exponential", np.eye(2)), -math.exp(-2) * np.eye(2))
        assert problems.matrix_objective(data, "exponential", np.zeros((2, 2))) == 1.0


class TestGeometryValues:
    def test_links(self):
        assert np.array_equal(Entropy().grad(np.ones(2)), [0.0, 0.0])
        w = np.array([0.3, -1.2])
        assert np.array_equal(Quadratic(np.eye(2)).grad(w), w)
        assert np.allclose(Entropy().grad_inverse(np.array([-0.4, -0.8])), [0.6703, 0.4493], atol=1e-4)

    def test_divergences(self):
        assert SquaredEuclidean().bregman(np.array([1.0, 0.0]), np.zeros(2)) == 0.5
        assert Entropy().bregman(np.array([0.5, 0.25]), np.ones(2)) == pytest.approx(0.5569, abs=1e-4)

    def test_hessian_inverse(self):
        assert np.allclose(Entropy().hessian_inverse_apply(np.ones(2), np.array([4.0, 8.0])), [4.0, 8.0])
        assert np.allclose(Entropy().hessian_inverse_apply(np.array([2.0, 1.0]), np.ones(2)), [2.0, 1.0])
        g = np.array([1.0, -3.0])
        assert np.allclose(Quadratic(2 * np.eye(2)).hessian_inverse_apply(np.zeros(2), g), g / 2)

    def test_norm_values(self):
        assert Norm("lp", 2).value([3.0, 4.0]) == 5.0
        assert Norm("lp", 2).dual_value([3.0, 4.0]) == 5.0
        assert Norm("lp", 1).value([3.0, -4.0]) == 7.0
        assert Norm("lp", 1).dual_value([3.0, -4.0]) == 4.0
        assert Norm("lp", "4/3").value([1.0, 1.0]) == pytest.approx(2 ** 0.75)

    def test_duality_maps(self):
        assert np.allclose(Norm("lp", 2).duality_map([4.0, 8.0]), [-4.0, -8.0])
        for p in ("1", "4/3", "3/2", "2", "3", "inf"):
            assert np.allclose(Norm("lp", p).duality_map([0.0, -2.5, 0.0]), [0.0, 2.5, 0.0])
        assert np.allclose(Norm("lp", 1).duality_map([4.0, -8.0, 1.0]), [0.0, 8.0, 0.0])
        assert np.allclose(Norm("lp", 1).duality_map([5.0, -5.0]), [-2.5, 2.5])
        assert np.allclose(Norm("lp", 1, tie_rule="first-index").duality_map([5.0, -5.0]), [-5.0, 0.0])
        assert not np.any(Norm("lp", "4/3").duality_map(np.zeros(3)))


class TestStepValues:
    def test_gd(self):
        cfg = OptimizerConfig(eta=0.1)
        s = optimizers.gd_step(init_state([1.0, 1.0]), _example1(), "squared", cfg)
        assert np.allclose(s.w, [0.6, 0.2])
        s = optimizers.gd_step(init_state([1.0, 1.0]), _example1(), "squared", OptimizerConfig(eta=0.0))
        assert np.array_equal(s.w, [1.0, 1.0])
        s = optimizers.gd_step(init_state([0.2, 0.4]), _example1(), "squared", cfg)
        assert np.allclose(s.w, [0.2, 0.4], atol=1e-16)

    def test_first_momentum_step_is_gradient_step(self):
        data = problems.random_regression(0, 3, 5)
        w0 = np.ones(5)
        a = optimizers.momentum_step(init_state(w0), data, "squared", OptimizerConfig(eta=0.05, beta=0.7, gamma=0.4))
        b = optimizers.gd_step(init_state(w0), data, "squared", OptimizerConfig(eta=0.05))
        assert np.array_equal(a.w, b.w)

    def test_momentum_from_zero_stays_in_span(self):
        data = problems.random_regression(1, 3, 6)
        data = Dataset(data.features / np.sqrt(6), data.labels)
        cfg = OptimizerConfig(eta=0.1, beta=0.5, gamma=0.5)
        state = init_state(np.zeros(6))
        for _ in range(200):
            state = optimizers.momentum_step(state, data, "squared", cfg)
            assert np.linalg.norm(data.off_span(state.w)) < 1e-10

    def test_entropy_md_step(self):
        s = optimizers.md_step(init_state([1.0, 1.0], Entropy()), _example1(), "squared", Entropy(),
                               OptimizerConfig(eta=0.05))
        assert np.allclose(s.w, [math.exp(-0.2), math.exp(-0.4)])

    def test_entropy_md_limit(self):
        cfg = OptimizerConfig(eta=0.05, backtrack=True)
        state = optimizers.iterate(lambda s: optimizers.md_step(s, _example1(), "squared", Entropy(), cfg),
                                   init_state([1.0, 1.0], Entropy()), 3000)
        assert np.allclose(state.w, [0.5, 0.25], atol=1e-6)

    def test_unconstrained_projection_step_is_md_step(self):
        data = problems.random_positive_regression(0, 3, 6)
        w0 = np.ones(6)
        cfg = OptimizerConfig(eta=0.01)
        a = optimizers.md_constrained_step(init_state(w0, Entropy()), data, "squared", Entropy(),
                                           (np.zeros((0, 6)), np.zeros(0)), cfg)
        b = optimizers.md_step(init_state(w0, Entropy()), data, "squared", Entropy(), cfg)
        assert np.allclose(a.w, b.w, rtol=1e-14)

    def test_simplex_limit_symmetric_case(self):
        data = Dataset([[1.0, 0.0, 0.0]], [0.2])
        simplex = (np.ones((1, 3)), np.ones(1))
        cfg = OptimizerConfig(eta=0.5)
        state = optimizers.iterate(
            lambda s: optimizers.md_constrained_step(s, data, "squared", Entropy(), simplex, cfg),
            init_state(np.full(3, 1 / 3), Entropy()), 2000)
        assert np.allclose(state.w, [0.2, 0.4, 0.4], atol=1e-6)

    def test_ngd_first_entropy_step_is_gradient_step(self):
        a = optimizers.ngd_step(init_state([1.0, 1.0], Entropy()), _example1(), "squared", Entropy(),
                                OptimizerConfig(eta=0.05))
        b = optimizers.gd_step(init_state([1.0, 1.0]), _example1(), "squared", OptimizerConfig(eta=0.05))
        assert np.allclose(a.w, b.w, atol=1e-15)

    def test_adagrad_accumulates_squares(self):
        # squared loss at w = 0 with x = [3, 4], y = -0.5 has gradient [3, 4]
        data = Dataset([[3.0, 4.0]], [-0.5])
        s = optimizers.adagrad_step(init_state(np.zeros(2), G0=0.0), data, "squared", OptimizerConfig(eta=0.1))
        assert np.array_equal(s.accumulator, [9.0, 16.0])

    def test_adagrad_with_identity_is_gradient_descent(self):
        data = problems.random_regression(0, 3, 5)
        w0 = np.ones(5)
        a = optimizers.adagrad_step(init_state(w0, G0=np.eye(5)), data, "squared",
                                    OptimizerConfig(eta=0.05, adapt=False))
        b = optimizers.gd_step(init_state(w0), data, "squared", OptimizerConfig(eta=0.05))
        assert np.allclose(a.w, b.w, atol=1e-15)

    def test_factored_step_closed_form(self):
        eta = 0.3
        s = optimizers.factored_gd_step(init_state(U0=np.eye(2)), _identity_matrix_data(), "exponential",
                                        OptimizerConfig(eta=eta))
        assert np.allclose(s.U, (1 + 2 * eta * math.exp(-2)) * np.eye(2), atol=1e-15)
        s = optimizers.factored_gd_step(init_state(U0=np.eye(2)), _identity_matrix_data(), "exponential",
                                        OptimizerConfig(eta=0.0))
        assert np.array_equal(s.U, np.eye(2))

    def test_factored_step_induced_matrix_update(self):
        rng = np.random.default_rng(5)
        data = problems.random_psd_separable(5, 4, 3)
        for _ in range(10):
            U = rng.standard_normal((3, 3))
            eta = rng.uniform(0.01, 0.5)
            s = optimizers.factored_gd_step(init_state(U0=U), data, "exponential", OptimizerConfig(eta=eta))
            G = problems.matrix_gradient(data, "exponential", U @ U.T)
            S = G + G.T
            W = U @ U.T
            expected = W - eta * (S @ W + W @ S) + eta**2 * S @ W @ S
            assert np.allclose(s.U @ s.U.T, expected, atol=1e-10)

    def test_loss_adaptive_formula(self):
        assert optimizers.step_size_loss_adaptive(1.0, 1.0, 2.0) == 0.5
        assert optimizers.step_size_loss_adaptive(1.0, 1.0, 1e-300, eta_max=3.0) == 3.0


class TestFlowValues:
    def test_gradient_flow_reaches_affine_projection(self):
        w0 = np.array([1.0, 1.0])
        w = optimizers.flow_limit("mirror", w0, _example1(), "squared", SquaredEuclidean(), loss_tol=1e-20)
        assert np.allclose(w, [0.6, 0.2], atol=1e-9)

    def test_zero_gradient_start_is_constant(self):
        traj = optimizers.integrate_flow("mirror", [0.2, 0.4], _example1(), "squared", SquaredEuclidean(),
                                         time_grid=np.linspace(0, 5, 6))
        assert np.allclose(traj.points, [0.2, 0.4], atol=1e-15)


class TestOracleValues:
    def test_projections(self):
        data = _example1()
        assert np.allclose(oracles.bregman_projection(SquaredEuclidean(), data, np.ones(2)).w_star, [0.6, 0.2])
        assert np.allclose(oracles.bregman_projection(Entropy(), data, np.ones(2)).w_star, [0.5, 0.25])
        res = oracles.bregman_projection(Entropy(), data, np.array([0.6, 0.2]))
        assert np.allclose(res.w_star, [0.6, 0.2], atol=1e-14)
        assert np.allclose(res.dual_coefficients, 0.0, atol=1e-14)

    def test_kkt_residual_values(self):
        data = _example1()
        w = oracles.bregman_projection(Entropy(), data, np.ones(2)).w_star
        assert max(oracles.kkt_residual(Entropy(), data, np.ones(2), w)) <= 1e-8
        assert oracles.kkt_residual(Entropy(), data, np.ones(2), np.array([0.6, 0.2]))[0] > 1e-2
        empty = Dataset(np.zeros((0, 2)), np.zeros(0))
        w, w0 = np.array([0.5, 2.0]), np.array([1.0, 1.0])
        stat, _ = oracles.kkt_residual(Entropy(), empty, w0, w)
        assert stat == pytest.approx(np.linalg.norm(np.log(w) - np.log(w0)))

    def test_support_sets(self):
        data = Dataset([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], [1.0, 1.0, 1.0])
        assert oracles.support_vectors(data, np.array([1.0, 1.0]) / math.sqrt(2)) == [0, 1]
        assert oracles.support_vectors(Dataset([[1.0, 3.0]], [-1.0]), [1.0, 0.0]) == [0]

    def test_cone_residuals(self):
        data = Dataset([[3.0, 4.0], [0.0, 2.0]], [1.0, -1.0])
        for k in (0, 1):
            z = data.labels[k] * data.features[k] / np.linalg.norm(data.features[k])
            assert oracles.nonneg_span_residual(data, [0, 1], z) == pytest.approx(0.0, abs=1e-12)
        assert oracles.nonneg_span_residual(data, [0], np.array([0.8, -0.6])) == pytest.approx(1.0)

    def test_eigen_factor_residual(self):
        # identity data: the normalized gradient is proportional to the identity
        U = np.linalg.qr(np.random.default_rng(0).standard_normal((2, 2)))[0]
        assert oracles.factored_stationarity_residual(U, _identity_matrix_data()) == pytest.approx(0.0, abs=1e-14)


class TestHarnessValues:
    def test_margin_gap_values(self):
        data = Dataset([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
        cert = oracles.max_margin(Norm("lp", 2), data, check_degenerate=False)
        assert harness.margin_gap(data, cert.direction, cert) <= 1e-8
        assert harness.margin_gap(data, np.array([1.0, -0.5]), cert) > cert.gamma
