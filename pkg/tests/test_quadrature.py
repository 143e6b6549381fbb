"""Quadrature rules against closed-form normal moments and dense grids."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latira.quadrature import (
    MAX_POINTS,
    MIN_POINTS,
    NumericalError,
    QuadratureRule,
    gauss_hermite,
    integrate_normal,
    integrate_normal_kd,
    cholesky_spd,
    product_nodes,
)


class TestGaussHermite:
    def test_weights_sum_to_one(self):
        for n in (2, 5, 21, 64, 200):
            rule = gauss_hermite(n)
            assert abs(rule.weights.sum() - 1.0) < 1e-12

    def test_normal_moments_exact(self):
        rule = gauss_hermite(10)
        # exact for polynomial degree <= 19
        for k, expected in [(0, 1.0), (1, 0.0), (2, 1.0), (3, 0.0), (4, 3.0), (6, 15.0), (8, 105.0)]:
            got = float(rule.weights @ rule.nodes**k)
            assert got == pytest.approx(expected, abs=1e-9)

    def test_node_symmetry(self):
        rule = gauss_hermite(21)
        assert np.allclose(rule.nodes, -rule.nodes[::-1])
        assert np.allclose(rule.weights, rule.weights[::-1])
        assert rule.nodes[10] == 0.0

    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            gauss_hermite(MIN_POINTS - 1)
        with pytest.raises(ValueError):
            gauss_hermite(MAX_POINTS + 1)

    def test_agrees_with_dense_grid(self):
        # oracle: trapezoid rule on a very fine grid
        grid = np.linspace(-10, 10, 400001)
        phi = np.exp(-0.5 * grid**2) / np.sqrt(2 * np.pi)

        def dense(f):
            return np.trapezoid(f(grid) * phi, grid)

        rule = gauss_hermite(40)
        for f in (np.cos, lambda v: np.exp(0.3 * v), lambda v: 1 / (1 + np.exp(-v))):
            assert integrate_normal(f, rule) == pytest.approx(dense(f), abs=1e-10)


class TestRuleInvariants:
    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            QuadratureRule(nodes=np.array([-1.0, 1.0]), weights=np.array([1.5, -0.5]))

    def test_rejects_unsorted_nodes(self):
        with pytest.raises(ValueError):
            QuadratureRule(nodes=np.array([1.0, -1.0]), weights=np.array([0.5, 0.5]))

    def test_rejects_asymmetric_nodes(self):
        with pytest.raises(ValueError):
            QuadratureRule(nodes=np.array([-1.0, 2.0]), weights=np.array([0.5, 0.5]))

    def test_rejects_bad_weight_sum(self):
        with pytest.raises(ValueError):
            QuadratureRule(nodes=np.array([-1.0, 1.0]), weights=np.array([0.6, 0.6]))

    def test_nodes_immutable(self):
        rule = gauss_hermite(5)
        with pytest.raises(ValueError):
            rule.nodes[0] = 0.0


class TestIntegrateNormal:
    def test_affine_transform(self):
        rule = gauss_hermite(30)
        # E[V^2] for V ~ N(2, 9) is 4 + 9
        assert integrate_normal(lambda v: v**2, rule, mean=2.0, sd=3.0) == pytest.approx(13.0)

    def test_sd_must_be_positive(self):
        rule = gauss_hermite(5)
        with pytest.raises(ValueError):
            integrate_normal(np.cos, rule, sd=0.0)

    def test_nonfinite_integrand_raises(self):
        rule = gauss_hermite(5)
        with pytest.raises(NumericalError):
            integrate_normal(lambda v: np.log(v - 100.0), rule)

    @settings(max_examples=30, deadline=None)
    @given(
        mean=st.floats(-3, 3),
        sd=st.floats(0.1, 3),
        a=st.floats(-2, 2),
        b=st.floats(-2, 2),
    )
    def test_linear_functions_exact(self, mean, sd, a, b):
        rule = gauss_hermite(7)
        got = integrate_normal(lambda v: a * v + b, rule, mean, sd)
        assert got == pytest.approx(a * mean + b, abs=1e-9)


class TestMultivariate:
    def test_product_nodes_shape(self):
        rule = gauss_hermite(5)
        nodes, weights = product_nodes(rule, 3)
        assert nodes.shape == (125, 3)
        assert weights.shape == (125,)
        assert abs(weights.sum() - 1.0) < 1e-12

    def test_kd_mean_and_cov(self):
        rule = gauss_hermite(15)
        mean = np.array([1.0, -0.5])
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        for i in range(2):
            got = integrate_normal_kd(lambda p, i=i: p[:, i], rule, mean, cov)
            assert got == pytest.approx(mean[i], abs=1e-10)
        got = integrate_normal_kd(
            lambda p: (p[:, 0] - mean[0]) * (p[:, 1] - mean[1]), rule, mean, cov
        )
        assert got == pytest.approx(0.6, abs=1e-10)

    def test_kd_matches_2d_grid(self):
        # oracle: midpoint rule over a fine 2-d grid
        rule = gauss_hermite(25)
        mean = np.zeros(2)
        cov = np.array([[1.0, 0.4], [0.4, 1.0]])
        g = np.linspace(-8, 8, 1200)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        det = np.linalg.det(cov)
        inv = np.linalg.inv(cov)
        quad_form = np.einsum("ni,ij,nj->n", pts, inv, pts)
        dens = np.exp(-0.5 * quad_form) / (2 * np.pi * np.sqrt(det))
        h = g[1] - g[0]

        def f(p):
            return np.cos(p[:, 0]) * np.exp(0.2 * p[:, 1])

        oracle = float(np.sum(f(pts) * dens) * h * h)
        got = integrate_normal_kd(f, rule, mean, cov)
        assert got == pytest.approx(oracle, abs=1e-7)

    def test_dimension_cap(self):
        rule = gauss_hermite(3)
        with pytest.raises(ValueError):
            integrate_normal_kd(lambda p: p[:, 0], rule, np.zeros(4), np.eye(4))

    def test_cholesky_rejects_non_spd(self):
        with pytest.raises(ValueError):
            cholesky_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            cholesky_spd(np.array([[1.0, 0.5], [0.4, 1.0]]))
