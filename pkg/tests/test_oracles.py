import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iblab import oracles, problems
from iblab.geometry import Entropy, Norm, SquaredEuclidean, SquaredLp
from iblab.problems import Dataset, MatrixDataset


def _two_point():
    return Dataset([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])


class TestRegressionOracles:
    def test_kkt_residual_at_projection(self):
        data = Dataset([[1.0, 2.0]], [1.0])
        stat, feas = oracles.kkt_residual(Entropy(), data, np.ones(2), np.array([0.5, 0.25]))
        assert stat < 1e-15 and feas < 1e-15

    def test_kkt_residual_off_projection(self):
        # feasible but not the entropy projection of the all-ones point
        data = Dataset([[1.0, 2.0]], [1.0])
        stat, feas = oracles.kkt_residual(Entropy(), data, np.ones(2), np.array([0.6, 0.2]))
        assert feas < 1e-15
        assert stat > 1e-2

    def test_min_norm_matches_pseudo_inverse(self):
        data = problems.random_regression(1, 3, 7)
        w = oracles.bregman_projection(SquaredEuclidean(), data, np.zeros(7)).w_star
        assert np.allclose(w, np.linalg.pinv(data.features) @ data.labels, atol=1e-10)

    def test_projection_reports_residuals(self):
        data = problems.random_positive_regression(2, 3, 6)
        res = oracles.bregman_projection(SquaredLp("3/2"), data, np.zeros(6))
        assert res.feasibility_residual < 1e-9
        assert res.stationarity_residual < 1e-9

    def test_min_norm_interpolant_agrees_with_projection(self):
        data = problems.builtin_dataset("example3")
        conic = oracles.min_norm_interpolant(Norm("lp", "4/3"), data)
        newton = oracles.bregman_projection(SquaredLp("4/3"), data, np.zeros(data.dim)).w_star
        assert np.allclose(conic, newton, atol=1e-4)


class TestMarginOracles:
    @pytest.mark.parametrize("p, gamma, direction", [
        ("2", 1 / math.sqrt(2), [1 / math.sqrt(2), 1 / math.sqrt(2)]),
        ("1", 0.5, [0.5, 0.5]),
        ("inf", 1.0, [1.0, 1.0]),
    ])
    def test_two_point_margins(self, p, gamma, direction):
        cert = oracles.max_margin(Norm("lp", p), _two_point())
        assert cert.gamma == pytest.approx(gamma, abs=1e-7)
        assert np.allclose(cert.direction, direction, atol=1e-6)
        assert cert.support == [0, 1]
        assert not cert.degenerate
        assert cert.alpha.sum() == pytest.approx(1.0)

    def test_degenerate_face_detected(self):
        # one example in l-infinity: every w with w1 = 1 and |w2| <= 1 is optimal
        data = Dataset([[1.0, 0.0]], [1.0])
        cert = oracles.max_margin(Norm("lp", "inf"), data)
        assert cert.gamma == pytest.approx(1.0, abs=1e-7)
        assert cert.degenerate

    def test_non_separable(self):
        data = Dataset([[1.0, 0.0], [1.0, 0.0]], [1.0, -1.0])
        cert = oracles.max_margin(Norm("lp", 2), data, check_degenerate=False)
        assert not cert.separable
        assert cert.direction is None

    def test_requires_labels(self):
        with pytest.raises(ValueError):
            oracles.max_margin(Norm("lp", 2), problems.random_regression(0))

    def test_svm_cross_check(self):
        data = problems.random_separable(5, 10, 3, 0.3)
        cert = oracles.max_margin(Norm("lp", 2), data, check_degenerate=False)
        assert oracles.svm_margin(data)[0] == pytest.approx(cert.gamma, abs=1e-6)

    @pytest.mark.parametrize("p", ["1", "4/3", "2", "inf"])
    def test_grid_agrees(self, p):
        data = problems.random_separable(3, 10, 2, 0.3)
        cert = oracles.max_margin(Norm("lp", p), data, check_degenerate=False)
        assert oracles.grid_max_margin(Norm("lp", p), data)[0] == pytest.approx(cert.gamma, abs=1e-4)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["1", "3/2", "2", "3", "inf"]))
    def test_weak_duality(self, seed, p):
        # for any simplex weights, ||sum a_n y_n x_n||_* >= gamma
        data = problems.random_separable(seed % 100, 8, 3, 0.3)
        norm = Norm("lp", p)
        cert = oracles.max_margin(norm, data, check_degenerate=False)
        alpha = np.random.default_rng(seed).dirichlet(np.ones(8))
        assert norm.dual_value(data.signed_features.T @ alpha) >= cert.gamma - 1e-8
        assert cert.residuals["dual_gap"] < 1e-5

    def test_support_vectors(self):
        data = Dataset([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], [1.0, 1.0, 1.0])
        assert oracles.support_vectors(data, [1.0, 1.0]) == [0, 1]
        assert oracles.support_vectors(data, [1.0, 0.0]) == [1]
        with pytest.raises(ValueError):
            oracles.support_vectors(data, [0.0, 0.0])

    def test_nonneg_span_residual(self):
        data = _two_point()
        assert oracles.nonneg_span_residual(data, [0, 1], [2.0, 3.0]) == pytest.approx(0.0, abs=1e-14)
        assert oracles.nonneg_span_residual(data, [0, 1], [-1.0, 0.0]) == pytest.approx(1.0)
        assert oracles.nonneg_span_residual(data, [], [3.0, 4.0]) == pytest.approx(5.0)

    def test_certificate_round_trip(self):
        cert = oracles.max_margin(Norm("lp", 2), _two_point())
        back = oracles.MarginCertificate.from_dict(json.loads(json.dumps(cert.to_dict())))
        assert back.gamma == cert.gamma
        assert np.array_equal(back.direction, cert.direction)
        assert back.support == cert.support
        assert back.residuals == cert.residuals


class TestNuclearOracles:
    def test_identity_is_degenerate(self):
        data = MatrixDataset([np.eye(2)], [1.0])
        cert = oracles.nuclear_margin(data)
        assert cert.gamma == pytest.approx(1.0, abs=1e-6)
        assert cert.degenerate

    def test_rank_one_optimum(self):
        data = MatrixDataset([np.diag([1.0, -1.0])], [1.0])
        cert = oracles.nuclear_margin(data)
        assert cert.gamma == pytest.approx(1.0, abs=1e-6)
        assert np.allclose(cert.direction, np.diag([1.0, 0.0]), atol=1e-5)
        assert not cert.degenerate

    def test_negative_identity_not_separable(self):
        cert = oracles.nuclear_margin(MatrixDataset([-np.eye(2)], [1.0]), check_degenerate=False)
        assert cert.gamma <= 0
        assert not cert.separable

    def test_grid_agrees(self):
        data = problems.random_psd_separable(2, 5, 2, 3.0)
        cert = oracles.nuclear_margin(data, check_degenerate=False)
        assert oracles.grid_nuclear_margin(data)[0] == pytest.approx(cert.gamma, abs=1e-4)

    def test_factored_residual_zero_at_top_eigenvector(self):
        # single example diag(1, -1): the normalized gradient is diag(1, -1), whose top eigenvector is e1
        data = MatrixDataset([np.diag([1.0, -1.0])], [1.0])
        U = np.array([[2.0, 0.0], [0.0, 0.0]])
        assert oracles.factored_stationarity_residual(U, data) == pytest.approx(0.0, abs=1e-14)
        kkt = oracles.factored_kkt(U, data)
        assert kkt["complementary_slackness"] == pytest.approx(0.0, abs=1e-14)
        assert kkt["normalized_margin"] == pytest.approx(1.0)

    def test_factored_residual_positive_off_optimum(self):
        data = MatrixDataset([np.diag([1.0, -1.0])], [1.0])
        U = np.array([[1.0, 0.0], [0.5, 0.0]])
        assert oracles.factored_stationarity_residual(U, data) > 0.1

    def test_zero_factor_rejected(self):
        data = MatrixDataset([np.eye(2)], [1.0])
        with pytest.raises(oracles.DegenerateCertificateError):
            oracles.factored_stationarity_residual(np.zeros((2, 2)), data)
