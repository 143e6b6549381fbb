"""Likelihood values against independent dense-grid integration."""
import numpy as np
import pytest
from scipy.special import expit

from latira.likelihood import (
    Step1Spec,
    implied_gaussian,
    item_logprob,
    joint_loglik,
    step1_loglik,
    step1_pack,
    step1_unpack,
    step2_loglik,
)
from latira.model import (
    Dataset,
    JointModel,
    LatentBlock,
    MeasurementBlock,
    ResponseModel,
    StructuralSpec,
    pack,
)
from latira.quadrature import gauss_hermite

RULE = gauss_hermite(40)


def grid_loglik_1d(y_rows, tau, lam, mu, sigma2):
    """Oracle: trapezoid integration of the item likelihood over a dense grid."""
    grid = np.linspace(-10, 10, 100001)
    dens = np.exp(-0.5 * (grid - mu) ** 2 / sigma2) / np.sqrt(2 * np.pi * sigma2)
    total = 0.0
    for row in y_rows:
        like = np.ones_like(grid)
        for j, yj in enumerate(row):
            if np.isnan(yj):
                continue
            p = expit(tau[j] + lam[j] * grid)
            like *= p if yj == 1.0 else (1.0 - p)
        total += np.log(np.trapezoid(like * dens, grid))
    return total


class TestItemLogprob:
    def test_matches_direct_formula(self):
        eta = np.array([-1.0, 0.0, 2.0])
        for y in (0.0, 1.0):
            got = item_logprob(0.3, 1.2, eta, y)
            p = expit(0.3 + 1.2 * eta)
            expected = np.log(p if y == 1.0 else 1.0 - p)
            assert np.allclose(got, expected, atol=1e-12)

    def test_no_overflow_at_extreme_eta(self):
        got = item_logprob(0.0, 1.0, np.array([-800.0, 800.0]), 1.0)
        assert np.all(np.isfinite(got[1:])) and got[0] == -800.0


class TestStep1Loglik:
    def fixture(self):
        block = MeasurementBlock(
            0, np.array([0.0, 0.4, -0.3]), np.array([1.0, 1.3, 0.8])
        )
        y = np.array(
            [
                [1.0, 0.0, 1.0],
                [0.0, 0.0, 0.0],
                [1.0, 1.0, np.nan],
                [1.0, 0.0, 1.0],
            ]
        )
        return Step1Spec(block, mu=0.3, sigma2=1.5), y

    def test_matches_dense_grid(self):
        spec, y = self.fixture()
        got = step1_loglik(spec, y, RULE)
        oracle = grid_loglik_1d(y, spec.block.tau, spec.block.lam, spec.mu, spec.sigma2)
        assert got == pytest.approx(oracle, abs=1e-7)

    def test_pattern_collapsing_invariant(self):
        # duplicated rows must contribute exactly proportionally
        spec, y = self.fixture()
        single = step1_loglik(spec, y[:1], RULE)
        doubled = step1_loglik(spec, np.vstack([y[:1], y[:1]]), RULE)
        assert doubled == pytest.approx(2.0 * single, rel=1e-12)

    def test_pack_round_trip(self):
        spec, _ = self.fixture()
        again = step1_unpack(step1_pack(spec), spec)
        assert np.allclose(again.block.tau, spec.block.tau)
        assert np.allclose(again.block.lam, spec.block.lam)
        assert again.mu == pytest.approx(spec.mu)
        assert again.sigma2 == pytest.approx(spec.sigma2)

    def test_standardized_identification_round_trip(self):
        block = MeasurementBlock(0, np.array([0.1, -0.2]), np.array([0.7, 1.4]))
        spec = Step1Spec(block, identification="standardized")
        theta = step1_pack(spec)
        assert theta.size == 4  # both intercepts and both loadings free
        again = step1_unpack(theta, spec)
        assert np.allclose(again.block.lam, block.lam)

    def test_rejects_empty_rows(self):
        spec, _ = self.fixture()
        with pytest.raises(ValueError):
            step1_loglik(spec, np.array([[np.nan, np.nan, np.nan]]), RULE)


class TestImpliedGaussian:
    def test_chain_moments(self):
        structure = StructuralSpec(
            (
                LatentBlock(members=(0,), x_vars=(0,), beta0=np.array([0.5]),
                            beta_x=np.array([[0.7]]), psi=np.array([[0.8]])),
                LatentBlock(members=(1,), eta_vars=(0,), beta0=np.array([-0.2]),
                            beta_eta=np.array([[0.6]]), psi=np.array([[0.5]])),
            )
        )
        a, b, c = implied_gaussian(structure, n_x=1, n_latent=2)
        assert a == pytest.approx([0.5, -0.2 + 0.6 * 0.5])
        assert b[:, 0] == pytest.approx([0.7, 0.6 * 0.7])
        assert c[0, 0] == pytest.approx(0.8)
        assert c[0, 1] == pytest.approx(0.6 * 0.8)
        assert c[1, 1] == pytest.approx(0.6**2 * 0.8 + 0.5)

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(5)
        structure = StructuralSpec(
            (
                LatentBlock(members=(0,), psi=np.array([[1.2]])),
                LatentBlock(members=(1,), eta_vars=(0,), beta_eta=np.array([[0.5]]),
                            psi=np.array([[0.7]])),
            )
        )
        a, _, c = implied_gaussian(structure, n_x=0, n_latent=2)
        e0 = np.sqrt(1.2) * rng.standard_normal(400000)
        e1 = 0.5 * e0 + np.sqrt(0.7) * rng.standard_normal(400000)
        sim = np.cov(np.vstack([e0, e1]))
        assert np.allclose(c, sim, atol=0.02)
        assert np.allclose(a, [e0.mean(), e1.mean()], atol=0.02)


def toy_joint_model():
    blocks = (
        MeasurementBlock(0, np.array([0.0, 0.2]), np.array([1.0, 1.4])),
        MeasurementBlock(1, np.array([0.0, -0.3]), np.array([1.0, 0.9])),
    )
    structure = StructuralSpec(
        (
            LatentBlock(members=(0,), beta0=np.array([0.1]), psi=np.array([[0.9]])),
            LatentBlock(members=(1,), eta_vars=(0,), beta0=np.array([-0.1]),
                        beta_eta=np.array([[0.5]]), psi=np.array([[0.8]])),
        )
    )
    return JointModel(blocks=blocks, structure=structure)


def grid_loglik_2d(model, y_rows):
    """Oracle: 2-d midpoint integration of the joint item likelihood."""
    g = np.linspace(-8, 8, 1800)
    h = g[1] - g[0]
    e1, e2 = np.meshgrid(g, g, indexing="ij")
    a, _, c = implied_gaussian(model.structure, 0, 2)
    inv = np.linalg.inv(c)
    d1, d2 = e1 - a[0], e2 - a[1]
    qf = inv[0, 0] * d1**2 + 2 * inv[0, 1] * d1 * d2 + inv[1, 1] * d2**2
    dens = np.exp(-0.5 * qf) / (2 * np.pi * np.sqrt(np.linalg.det(c)))
    slices = model.item_slices()
    total = 0.0
    for row in y_rows:
        like = np.ones_like(e1)
        for b_i, block in enumerate(model.blocks):
            eta = e1 if block.latent_index == 0 else e2
            for j, yj in enumerate(row[slices[b_i]]):
                if np.isnan(yj):
                    continue
                p = expit(block.tau[j] + block.lam[j] * eta)
                like *= p if yj == 1.0 else (1.0 - p)
        total += np.log(np.sum(like * dens) * h * h)
    return total


class TestJointLoglik:
    Y = np.array(
        [
            [1.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
            [1.0, np.nan, 0.0, 0.0],
        ]
    )

    def test_matches_dense_grid(self):
        model = toy_joint_model()
        got = joint_loglik(model, Dataset(y=self.Y), RULE)
        oracle = grid_loglik_2d(model, self.Y)
        assert got == pytest.approx(oracle, abs=1e-7)

    def test_step2_equals_joint_at_same_point(self):
        model = toy_joint_model()
        data = Dataset(y=self.Y)
        theta2 = pack(model, "structural")
        got = step2_loglik(theta2, model.blocks, model, data, RULE)
        assert got == pytest.approx(joint_loglik(model, data, RULE), rel=1e-12)

    def test_response_model_matches_factorization(self):
        # with beta_eta = 0 the response factorizes out as a plain normal
        blocks = (MeasurementBlock(0, np.zeros(2), np.ones(2)),)
        structure = StructuralSpec(
            (LatentBlock(members=(0,)),),
            (ResponseModel(z_index=0, eta_vars=(0,), beta_eta=np.array([0.0]),
                           intercept=0.3, resid_var=1.5),),
        )
        model = JointModel(blocks=blocks, structure=structure)
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        z = np.array([[0.7], [-0.4]])
        got = joint_loglik(model, Dataset(y=y, z=z), RULE)

        items_only = JointModel(
            blocks=blocks, structure=StructuralSpec((LatentBlock(members=(0,)),))
        )
        part1 = joint_loglik(items_only, Dataset(y=y), RULE)
        dev = z[:, 0] - 0.3
        part2 = float(np.sum(-0.5 * np.log(2 * np.pi * 1.5) - dev**2 / 3.0))
        assert got == pytest.approx(part1 + part2, rel=1e-10)

    def test_missing_z_drops_its_term(self):
        blocks = (MeasurementBlock(0, np.zeros(2), np.ones(2)),)
        structure = StructuralSpec(
            (LatentBlock(members=(0,)),),
            (ResponseModel(z_index=0, eta_vars=(0,), beta_eta=np.array([0.4])),),
        )
        model = JointModel(blocks=blocks, structure=structure)
        y = np.array([[1.0, 0.0]])
        with_missing = joint_loglik(model, Dataset(y=y, z=np.array([[np.nan]])), RULE)
        items_only = JointModel(
            blocks=blocks, structure=StructuralSpec((LatentBlock(members=(0,)),))
        )
        assert with_missing == pytest.approx(
            joint_loglik(items_only, Dataset(y=y), RULE), rel=1e-10
        )

    def test_z_required_when_modeled(self):
        blocks = (MeasurementBlock(0, np.zeros(2), np.ones(2)),)
        structure = StructuralSpec(
            (LatentBlock(members=(0,)),),
            (ResponseModel(z_index=0, eta_vars=(0,)),),
        )
        model = JointModel(blocks=blocks, structure=structure)
        with pytest.raises(ValueError):
            joint_loglik(model, Dataset(y=np.array([[1.0, 0.0]])), RULE)
