import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iblab import problems
from iblab.problems import Dataset, Loss, MatrixDataset

finite = st.floats(-5, 5, allow_nan=False)


class TestLoss:
    def test_families(self):
        assert Loss("squared").family == "unique-finite-root"
        assert Loss("exponential").is_monotone
        assert Loss("logistic").is_monotone

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Loss("hinge")

    def test_values(self):
        assert problems.loss_value("squared", 3.0, 1.0) == 4.0
        assert problems.loss_value("exponential", 0.0, 1.0) == 1.0
        assert problems.loss_value("logistic", 0.0, 1.0) == pytest.approx(math.log(2))

    @given(finite, st.sampled_from([-1.0, 1.0]), st.sampled_from(["squared", "exponential", "logistic"]))
    def test_derivative_matches_finite_difference(self, u, y, kind):
        h = 1e-6
        numeric = (problems.loss_value(kind, u + h, y) - problems.loss_value(kind, u - h, y)) / (2 * h)
        assert problems.loss_derivative(kind, u, y) == pytest.approx(numeric, rel=1e-5, abs=1e-6)

    def test_exponential_saturates_instead_of_overflowing(self):
        assert math.isfinite(problems.loss_value("exponential", -1e6, 1.0))


class TestDataset:
    def test_shapes_validated(self):
        with pytest.raises(ValueError):
            Dataset([[1.0, 2.0]], [1.0, 2.0])
        with pytest.raises(ValueError):
            Dataset([1.0, 2.0], [1.0])
        with pytest.raises(ValueError):
            Dataset([[np.nan, 1.0]], [1.0])

    def test_frozen_arrays(self):
        d = problems.builtin_dataset("example1")
        with pytest.raises(ValueError):
            d.features[0, 0] = 5.0

    def test_classification_flag(self):
        assert not problems.random_regression(0).is_classification
        assert problems.random_separable(0).is_classification

    def test_off_span_of_feature_is_zero(self):
        d = problems.builtin_dataset("example3")
        assert np.allclose(d.off_span(d.features[1]), 0.0, atol=1e-12)
        v = np.cross(d.features[0], d.features[1])
        assert np.allclose(d.off_span(v), v)

    def test_feature_bound_cached_by_key(self):
        d = problems.random_separable(1)
        calls = []

        def dual(x):
            calls.append(1)
            return float(np.linalg.norm(x))

        b1 = d.feature_bound(dual, key="l2")
        b2 = d.feature_bound(dual, key="l2")
        assert b1 == b2 == pytest.approx(np.linalg.norm(d.features, axis=1).max())
        assert len(calls) == d.n_examples

    def test_round_trip_json(self, tmp_path):
        d = problems.random_regression(3)
        path = tmp_path / "d.json"
        problems.save_dataset(d, path)
        back = problems.load_dataset(path)
        assert np.array_equal(back.features, d.features)
        assert np.array_equal(back.labels, d.labels)

    def test_matrix_round_trip(self):
        d = problems.random_psd_separable(0)
        back = problems.dataset_from_dict(json.loads(json.dumps(d.to_dict())))
        assert isinstance(back, MatrixDataset)
        assert np.array_equal(back.features, d.features)

    def test_unknown_builtin(self):
        with pytest.raises(KeyError):
            problems.builtin_dataset("example9")


class TestGenerators:
    def test_seeded(self):
        a, b = problems.random_separable(4), problems.random_separable(4)
        assert np.array_equal(a.features, b.features)

    def test_separable_is_separable(self):
        d = problems.random_separable(2, shift=0.3)
        assert d.is_classification

    def test_positive_regression_has_positive_solution(self):
        from scipy.optimize import linprog

        d = problems.random_positive_regression(0, 3, 6)
        res = linprog(np.zeros(6), A_eq=d.features, b_eq=d.labels, bounds=[(0.1, None)] * 6)
        assert res.status == 0

    def test_psd_separable_margins_positive(self):
        d = problems.random_psd_separable(0, shift=1.0)
        assert d.is_classification
        # the rank-one planted direction separates with margin at least the shift
        rng = np.random.default_rng(0)
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        assert np.all(d.margins(np.outer(u, u)) >= 1.0 - 1e-12)

    def test_realizable(self):
        assert problems.is_realizable_underdetermined(problems.random_regression(0, 3, 10))
        assert not problems.is_realizable_underdetermined(problems.random_regression(0, 10, 3))


class TestObjective:
    @settings(max_examples=30)
    @given(st.integers(0, 1000), st.sampled_from(["squared", "exponential", "logistic"]))
    def test_gradient_matches_finite_difference(self, seed, kind):
        d = problems.random_separable(seed % 50, 6, 3)
        w = np.random.default_rng(seed).standard_normal(3) * 0.3
        g = problems.gradient(d, kind, w)
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            numeric = (problems.objective(d, kind, w + e) - problems.objective(d, kind, w - e)) / (2 * h)
            assert g[i] == pytest.approx(numeric, rel=1e-5, abs=1e-7)

    @given(st.integers(0, 1000))
    def test_normalized_gradient_is_gradient_over_loss(self, seed):
        d = problems.random_separable(seed % 50, 6, 3)
        w = np.random.default_rng(seed).standard_normal(3)
        L = problems.objective(d, "exponential", w)
        assert np.allclose(problems.normalized_gradient(d, w), problems.gradient(d, "exponential", w) / L)
        assert problems.log_objective(d, w) == pytest.approx(math.log(L))

    def test_log_objective_survives_underflow(self):
        d = problems.random_separable(0)
        w = 1e4 * np.array([1.0, 0.0])
        assert math.isfinite(problems.log_objective(d, w))

    def test_saturation_warns(self):
        d = problems.random_separable(0)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            value = problems.objective(d, "exponential", np.array([-1e6, -1e6]))
        assert value == problems.LOSS_CAP
        assert any(issubclass(w.category, problems.LossSaturationWarning) for w in caught)

    def test_subset_gradient(self):
        d = problems.random_regression(0, 3, 5)
        w = np.ones(5)
        full = problems.gradient(d, "squared", w)
        parts = sum(problems.gradient(d, "squared", w, [i]) for i in range(3))
        assert np.allclose(full, parts)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            problems.objective(problems.builtin_dataset("example1"), "squared", np.ones(3))

    def test_matrix_gradient_finite_difference(self):
        d = problems.random_psd_separable(1)
        W = np.random.default_rng(1).standard_normal((2, 2)) * 0.2
        G = problems.matrix_gradient(d, "exponential", W)
        h = 1e-6
        E = np.zeros((2, 2))
        E[0, 1] = h
        numeric = (problems.matrix_objective(d, "exponential", W + E)
                   - problems.matrix_objective(d, "exponential", W - E)) / (2 * h)
        assert G[0, 1] == pytest.approx(numeric, rel=1e-5)
