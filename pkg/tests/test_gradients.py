"""Analytic gradients against central finite differences of the objectives."""
import numpy as np
import pytest

from latira.likelihood import (
    Step1Spec,
    joint_loglik,
    joint_loglik_grad,
    step1_loglik,
    step1_loglik_grad,
    step1_pack,
    step1_unpack,
    step2_loglik,
    step2_loglik_grad,
)
from latira.model import (
    Dataset,
    JointModel,
    LatentBlock,
    MeasurementBlock,
    ResponseModel,
    StructuralSpec,
    free_dim,
    pack,
    unpack,
)
from latira.quadrature import gauss_hermite

RULE = gauss_hermite(15)
REL_TOL = 1e-5


def fd_gradient(f, theta, h=1e-6):
    g = np.empty(theta.size)
    for j in range(theta.size):
        step = h * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += step
        tm = theta.copy()
        tm[j] -= step
        g[j] = (f(tp) - f(tm)) / (2.0 * step)
    return g


def assert_close_rel(got, want, tol=REL_TOL):
    denom = np.maximum(1.0, np.abs(want))
    assert np.max(np.abs(got - want) / denom) < tol


def step1_fixture(rng):
    block = MeasurementBlock(0, np.zeros(4), np.ones(4))
    eta = rng.standard_normal(60)
    y = (rng.random((60, 4)) < 1.0 / (1.0 + np.exp(-eta[:, None]))).astype(float)
    y[rng.random(y.shape) < 0.05] = np.nan
    keep = ~np.all(np.isnan(y), axis=1)
    return Step1Spec(block), y[keep]


def joint_fixture(rng, with_xz=False):
    blocks = (
        MeasurementBlock(0, np.zeros(3), np.ones(3)),
        MeasurementBlock(1, np.zeros(3), np.ones(3)),
    )
    if with_xz:
        structure = StructuralSpec(
            (
                LatentBlock(members=(0,), x_vars=(0,)),
                LatentBlock(members=(1,), eta_vars=(0,)),
            ),
            (ResponseModel(z_index=0, x_vars=(0,), eta_vars=(1,)),),
        )
    else:
        structure = StructuralSpec(
            (LatentBlock(members=(0,)), LatentBlock(members=(1,), eta_vars=(0,)))
        )
    model = JointModel(blocks=blocks, structure=structure)
    n = 50
    y = (rng.random((n, 6)) < 0.5).astype(float)
    x = rng.standard_normal((n, 1)) if with_xz else None
    z = rng.standard_normal((n, 1)) if with_xz else None
    if with_xz:
        z[:3] = np.nan
    return model, Dataset(y=y, x=x, z=z)


class TestStep1Gradient:
    def test_fd_agreement_50_random_points(self):
        rng = np.random.default_rng(11)
        spec, y = step1_fixture(rng)
        for _ in range(50):
            theta = step1_pack(spec) + 0.4 * rng.standard_normal(step1_pack(spec).size)
            _, grad = step1_loglik_grad(step1_unpack(theta, spec), y, RULE)
            fd = fd_gradient(lambda t: step1_loglik(step1_unpack(t, spec), y, RULE), theta)
            assert_close_rel(grad, fd)

    def test_unit_scores_sum_to_gradient(self):
        rng = np.random.default_rng(2)
        spec, y = step1_fixture(rng)
        _, grad, scores = step1_loglik_grad(spec, y, RULE, unit_scores=True)
        assert scores.shape == (y.shape[0], grad.size)
        assert np.allclose(scores.sum(axis=0), grad, atol=1e-10)

    def test_standardized_identification_gradient(self):
        rng = np.random.default_rng(4)
        _, y = step1_fixture(rng)
        block = MeasurementBlock(0, np.zeros(4), np.ones(4))
        spec = Step1Spec(block, identification="standardized")
        theta = step1_pack(spec) + 0.3 * rng.standard_normal(8)
        _, grad = step1_loglik_grad(step1_unpack(theta, spec), y, RULE)
        fd = fd_gradient(lambda t: step1_loglik(step1_unpack(t, spec), y, RULE), theta)
        assert_close_rel(grad, fd)


class TestJointGradient:
    def test_fd_agreement_50_random_points(self):
        rng = np.random.default_rng(21)
        model, data = joint_fixture(rng)
        dim = free_dim(model, "all")
        for _ in range(50):
            theta = 0.4 * rng.standard_normal(dim)
            m = unpack(theta, model, "all")
            _, grad = joint_loglik_grad(m, data, RULE, which="all")
            fd = fd_gradient(lambda t: joint_loglik(unpack(t, model, "all"), data, RULE), theta)
            assert_close_rel(grad, fd)

    def test_fd_agreement_with_covariates_and_response(self):
        rng = np.random.default_rng(22)
        model, data = joint_fixture(rng, with_xz=True)
        dim = free_dim(model, "all")
        for _ in range(10):
            theta = 0.3 * rng.standard_normal(dim)
            m = unpack(theta, model, "all")
            _, grad = joint_loglik_grad(m, data, RULE, which="all")
            fd = fd_gradient(lambda t: joint_loglik(unpack(t, model, "all"), data, RULE), theta)
            assert_close_rel(grad, fd)

    def test_unit_scores_sum_to_gradient(self):
        rng = np.random.default_rng(23)
        model, data = joint_fixture(rng, with_xz=True)
        _, grad, scores = joint_loglik_grad(model, data, RULE, which="all", unit_scores=True)
        assert scores.shape == (data.n, grad.size)
        assert np.allclose(scores.sum(axis=0), grad, atol=1e-9)


class TestStep2Gradient:
    def test_fd_agreement_50_random_points(self):
        rng = np.random.default_rng(31)
        model, data = joint_fixture(rng, with_xz=True)
        dim2 = free_dim(model, "structural")
        for _ in range(50):
            theta2 = 0.4 * rng.standard_normal(dim2)
            _, grad = step2_loglik_grad(theta2, model.blocks, model, data, RULE)
            fd = fd_gradient(
                lambda t: step2_loglik(t, model.blocks, model, data, RULE), theta2
            )
            assert_close_rel(grad, fd)

    def test_measurement_parameters_stay_frozen(self):
        rng = np.random.default_rng(32)
        model, data = joint_fixture(rng)
        theta2 = pack(model, "structural")
        value = step2_loglik(theta2, model.blocks, model, data, RULE)
        assert value == pytest.approx(joint_loglik(model, data, RULE), rel=1e-12)
