"""Scikit-learn wrapper layer."""
import numpy as np
import pytest
from sklearn.base import clone

from latira.estimate import OptOptions, fit_step1, fit_step2
from latira.estimators import (
    FactorScorer,
    NaiveThreeStepEstimator,
    OneStepEstimator,
    TwoStepEstimator,
)
from latira.model import pack, pack_labels
from latira.quadrature import gauss_hermite
from latira.simgen import CellDesign, gen_dataset, model_for_design
from latira.threestep import score_matrix


@pytest.fixture(scope="module")
def case3():
    design = CellDesign(case="3", n=400, p=4, pi_y=0.5, r2_y=0.6, r2=0.2, seed=4)
    data, _ = gen_dataset(design, 0)
    return model_for_design(design), data


class TestTwoStep:
    def test_fit_matches_library(self, case3):
        model, data = case3
        est = TwoStepEstimator(model, quad_points=15).fit(data)
        rule = gauss_hermite(15)
        opts = OptOptions(n_starts=1, seed=0)
        step1 = fit_step1(model, data, rule, opts)
        fitted, _ = fit_step2(model, data, step1, rule, opts)
        assert np.allclose(pack(est.model_, "all"), pack(fitted, "all"))

    def test_fitted_attributes(self, case3):
        model, data = case3
        est = TwoStepEstimator(model, quad_points=15).fit(data)
        labels = pack_labels(est.model_, "structural")
        assert set(est.se_by_label_) == set(labels)
        assert all(v > 0 for v in est.se_by_label_.values())
        assert est.fit_result_.converged
        assert est.variance_.n == data.n
        assert "beta_eta[eta1][eta0]" in est.coef_by_label()

    def test_accepts_raw_item_matrix(self, case3):
        model, data = case3
        a = TwoStepEstimator(model, quad_points=15).fit(data)
        b = TwoStepEstimator(model, quad_points=15).fit(data.y)
        assert np.allclose(pack(a.model_, "all"), pack(b.model_, "all"))

    def test_get_params_and_clone(self, case3):
        model, _ = case3
        est = TwoStepEstimator(model, quad_points=15, sigma11_mode="score_crossblock")
        params = est.get_params()
        assert params["sigma11_mode"] == "score_crossblock"
        twin = clone(est)
        twin_params = twin.get_params()
        assert pack_labels(twin_params["model"], "all") == pack_labels(params["model"], "all")
        for key in ("quad_points", "n_starts", "seed", "sigma11_mode"):
            assert twin_params[key] == params[key]

    def test_set_params(self, case3):
        model, _ = case3
        est = TwoStepEstimator(model).set_params(quad_points=31, seed=7)
        assert est.quad_points == 31 and est.seed == 7


class TestOneStep:
    def test_fit_and_se(self, case3):
        model, data = case3
        est = OneStepEstimator(model, quad_points=15).fit(data)
        assert set(est.se_by_label_) == set(pack_labels(est.model_, "all"))
        assert est.fit_result_.converged


class TestNaiveThreeStep:
    def test_fit_and_scores(self, case3):
        model, data = case3
        est = NaiveThreeStepEstimator(model, quad_points=15).fit(data)
        assert est.scores_.values.shape == (data.n, 2)
        assert "beta_eta[eta1][eta0]" in est.se_by_label_

    def test_rescale_param_round_trips(self, case3):
        model, _ = case3
        est = NaiveThreeStepEstimator(model, rescale=True)
        assert clone(est).get_params()["rescale"] is True


class TestFactorScorer:
    def test_transform_matches_score_matrix(self, case3):
        model, data = case3
        scorer = FactorScorer(model, quad_points=15).fit(data)
        got = scorer.transform(data)
        want = score_matrix(scorer.step1_.specs, data, model, gauss_hermite(15)).values
        assert got.shape == (data.n, 2)
        assert np.allclose(got, want)

    def test_transform_on_new_data(self, case3):
        model, data = case3
        scorer = FactorScorer(model, quad_points=15).fit(data)
        out = scorer.transform(data.y[:10])
        assert out.shape == (10, 2)
        assert np.all(np.isfinite(out))
