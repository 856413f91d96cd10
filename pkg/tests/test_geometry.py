import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iblab import geometry
from iblab.geometry import Entropy, Norm, Quadratic, SquaredEuclidean, SquaredLp

vectors = arrays(np.float64, 4, elements=st.floats(-3, 3, allow_nan=False))
positive = arrays(np.float64, 4, elements=st.floats(0.05, 3))
exponents = st.sampled_from(["1", "4/3", "3/2", "2", "3", "inf"])


def _quadratic():
    A = np.array([[2.0, 0.3, 0.0, 0.1], [0.3, 1.0, 0.2, 0.0], [0.0, 0.2, 1.5, 0.0], [0.1, 0.0, 0.0, 1.0]])
    return Quadratic(A)


def _potentials():
    return [SquaredEuclidean(), _quadratic(), SquaredLp("3/2"), SquaredLp("4/3")]


class TestExponents:
    def test_parse(self):
        assert geometry.parse_exponent("4/3") == pytest.approx(4 / 3)
        assert geometry.parse_exponent("inf") == math.inf
        assert geometry.conjugate_exponent(4 / 3) == pytest.approx(4.0)
        assert geometry.conjugate_exponent(1) == math.inf
        assert geometry.format_exponent(geometry.parse_exponent("4/3")) == "4/3"

    def test_invalid_norm(self):
        with pytest.raises(ValueError):
            Norm("lp", 0.5)
        with pytest.raises(ValueError):
            Norm("hex")


class TestPotentials:
    @given(vectors)
    def test_link_round_trip(self, w):
        for pot in _potentials():
            assert np.allclose(pot.grad_inverse(pot.grad(w)), w, atol=1e-9)

    @given(positive)
    def test_entropy_link_round_trip(self, w):
        pot = Entropy()
        assert np.allclose(pot.grad_inverse(pot.grad(w)), w, rtol=1e-12)

    @given(vectors, vectors)
    def test_divergence_nonnegative(self, w, v):
        for pot in _potentials():
            assert pot.bregman(w, v) >= -1e-9

    @given(positive, positive)
    def test_entropy_divergence_nonnegative(self, w, v):
        assert Entropy().bregman(w, v) >= -1e-12

    def test_divergence_zero_on_diagonal(self):
        w = np.array([0.3, 1.2, 0.5, 2.0])
        for pot in _potentials() + [Entropy()]:
            assert pot.bregman(w, w) == pytest.approx(0.0, abs=1e-14)

    def test_entropy_domain(self):
        with pytest.raises(geometry.DomainError):
            Entropy().check(np.array([1.0, -0.1]))

    def test_quadratic_requires_positive_definite(self):
        with pytest.raises(ValueError):
            Quadratic(np.diag([1.0, -1.0]))

    @given(vectors)
    def test_conjugate_fenchel_young_equality(self, w):
        for pot in _potentials():
            z = pot.grad(w)
            assert pot.value(w) + pot.conjugate(z) == pytest.approx(float(w @ z), rel=1e-9, abs=1e-9)

    def test_config_round_trip(self):
        for pot in _potentials() + [Entropy()]:
            back = geometry.potential_from_config(pot.to_dict())
            w = np.array([0.2, 0.4, 1.0, 0.7])
            assert back.value(w) == pytest.approx(pot.value(w))


class TestProjection:
    def test_entropy_single_constraint(self):
        # from the all-ones point onto w1 + 2 w2 = 1
        w, _, res = geometry.bregman_project(Entropy(), [[1.0, 2.0]], [1.0], np.ones(2))
        assert res < 1e-12
        # optimality: log w = nu * a, so w2 = w1^2
        assert w[1] == pytest.approx(w[0] ** 2, rel=1e-10)
        assert w[0] + 2 * w[1] == pytest.approx(1.0)

    def test_entropy_projection_example(self):
        w, _, _ = geometry.bregman_project(Entropy(), [[1.0, 2.0]], [1.0], np.ones(2))
        assert np.allclose(w, [0.5, 0.25], atol=1e-12)

    def test_euclidean_projection_example(self):
        w, _, _ = geometry.bregman_project(SquaredEuclidean(), [[1.0, 2.0]], [1.0], np.zeros(2))
        assert np.allclose(w, [0.2, 0.4], atol=1e-14)

    def test_feasible_reference_returns_itself(self):
        w0 = np.array([0.6, 0.2])
        w, _, _ = geometry.bregman_project(Entropy(), [[1.0, 2.0]], [1.0], w0)
        assert np.allclose(w, w0, atol=1e-13)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_projection_is_feasible_and_orthogonal(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((2, 4))
        b = A @ rng.uniform(0.5, 2.0, 4)
        for pot in _potentials():
            w0 = rng.standard_normal(4)
            w, _, res = geometry.bregman_project(pot, A, b, w0)
            assert np.max(np.abs(A @ w - b)) < 1e-9
            # the link displacement lies in the row space of A
            dz = pot.grad(w) - pot.grad(w0)
            coef, *_ = np.linalg.lstsq(A.T, dz, rcond=None)
            assert np.allclose(A.T @ coef, dz, atol=1e-7 * (1 + np.abs(dz).max()))


class TestNorms:
    @given(vectors, exponents)
    def test_duality_map_identities(self, g, p):
        norm = Norm("lp", p)
        dw = norm.duality_map(g)
        dual = norm.dual_value(g)
        assert float(dw @ -g) == pytest.approx(dual**2, rel=1e-9, abs=1e-9)
        assert norm.value(dw) == pytest.approx(dual, rel=1e-9, abs=1e-9)

    @given(vectors)
    def test_quadratic_duality_map_identities(self, g):
        norm = Norm("quadratic", D=_quadratic().D)
        dw = norm.duality_map(g)
        dual = norm.dual_value(g)
        assert float(dw @ -g) == pytest.approx(dual**2, rel=1e-9, abs=1e-9)
        assert norm.value(dw) == pytest.approx(dual, rel=1e-9, abs=1e-9)

    @given(vectors, vectors, exponents)
    def test_holder(self, v, g, p):
        norm = Norm("lp", p)
        assert abs(float(v @ g)) <= norm.value(v) * norm.dual_value(g) * (1 + 1e-12) + 1e-12

    def test_dual_of_dual(self):
        n = Norm("lp", "4/3")
        assert n.dual().dual().p == pytest.approx(n.p)

    def test_coordinate_direction_ties(self):
        g = np.array([1.0, -1.0, 0.5])
        assert np.allclose(geometry.coordinate_direction(g), [-0.5, 0.5, 0.0])
        assert np.allclose(geometry.coordinate_direction(g, "first-index"), [-1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            geometry.coordinate_direction(g, "random")

    def test_near_ties_within_relative_tolerance(self):
        g = np.array([1.0, 1.0 - 1e-14])
        assert np.count_nonzero(geometry.coordinate_direction(g)) == 2

    def test_config_round_trip(self):
        for cfg in ({"kind": "lp", "p": "4/3"}, {"kind": "lp", "p": "inf"}):
            n = geometry.norm_from_config(cfg)
            assert n.to_dict() == cfg
        assert isinstance(geometry.geometry_from_config({"norm": {"p": 2}}), Norm)
