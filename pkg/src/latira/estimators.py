"""Scikit-learn style wrappers around the estimation drivers.

Each estimator takes a model template at construction and exposes
``fit(data)`` plus fitted attributes (``model_``, ``se_by_label_``).
``FactorScorer`` is a transformer turning item responses into
empirical-Bayes latent scores.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .estimate import OptOptions, fit_onestep, fit_step1, fit_step2
from .model import Dataset, JointModel, pack, pack_labels
from .quadrature import gauss_hermite
from .threestep import naive_threestep, score_matrix
from .variance import info_blocks, onestep_se, sigma11, twostep_variance

__all__ = [
    "TwoStepEstimator",
    "OneStepEstimator",
    "NaiveThreeStepEstimator",
    "FactorScorer",
]


def _as_dataset(X, z=None) -> Dataset:
    if isinstance(X, Dataset):
        return X
    return Dataset(y=np.asarray(X, float), z=z)


class _LatentTraitBase(BaseEstimator):
    """Shared plumbing: template model, quadrature size, optimizer options."""

    def __init__(self, model: JointModel, quad_points: int = 21,
                 n_starts: int = 1, seed: int = 0):
        self.model = model
        self.quad_points = quad_points
        self.n_starts = n_starts
        self.seed = seed

    def _rule(self):
        return gauss_hermite(self.quad_points)

    def _options(self):
        return OptOptions(n_starts=self.n_starts, seed=self.seed)

    def coef_by_label(self) -> dict[str, float]:
        """Fitted free parameters keyed by their packed labels."""
        labels = pack_labels(self.model_, "all")
        return dict(zip(labels, pack(self.model_, "all")))


class TwoStepEstimator(_LatentTraitBase):
    """Measurement models first, then the structural model with the
    measurement parameters frozen; standard errors include the
    step-1 contribution."""

    def __init__(self, model: JointModel, quad_points: int = 21, n_starts: int = 1,
                 seed: int = 0, sigma11_mode: str = "block_diagonal"):
        super().__init__(model, quad_points, n_starts, seed)
        self.sigma11_mode = sigma11_mode

    def fit(self, X, y=None):
        data = _as_dataset(X)
        rule = self._rule()
        opts = self._options()
        need_scores = self.sigma11_mode == "score_crossblock"
        self.step1_ = fit_step1(self.model, data, rule, opts, unit_scores=need_scores)
        self.model_, self.fit_result_ = fit_step2(self.model, data, self.step1_, rule, opts)
        blocks = info_blocks(self.model_, data, rule)
        s11 = sigma11(self.step1_, self.sigma11_mode)
        self.variance_ = twostep_variance(blocks, s11, data.n, self.step1_.n1)
        labels = pack_labels(self.model_, "structural")
        self.se_by_label_ = dict(zip(labels, self.variance_.se))
        return self

    def get_params(self, deep=True):
        return {
            "model": self.model,
            "quad_points": self.quad_points,
            "n_starts": self.n_starts,
            "seed": self.seed,
            "sigma11_mode": self.sigma11_mode,
        }


class OneStepEstimator(_LatentTraitBase):
    """Simultaneous maximum likelihood over measurement and structural
    parameters, with information-based standard errors."""

    def fit(self, X, y=None):
        data = _as_dataset(X)
        rule = self._rule()
        self.model_, self.fit_result_ = fit_onestep(self.model, data, rule, self._options())
        ses = onestep_se(self.model_, data, rule)
        labels = pack_labels(self.model_, "all")
        self.se_by_label_ = dict(zip(labels, ses))
        return self


class NaiveThreeStepEstimator(_LatentTraitBase):
    """Factor scores substituted into least-squares structural regressions,
    with uncorrected regression standard errors."""

    def __init__(self, model: JointModel, quad_points: int = 21, n_starts: int = 1,
                 seed: int = 0, rescale: bool = False):
        super().__init__(model, quad_points, n_starts, seed)
        self.rescale = rescale

    def fit(self, X, y=None):
        data = _as_dataset(X)
        rule = self._rule()
        self.step1_ = fit_step1(self.model, data, rule, self._options())
        result = naive_threestep(data, self.model, self.step1_, rule, rescale=self.rescale)
        self.model_ = result.estimates
        self.se_by_label_ = result.se_by_label
        self.scores_ = result.scores
        return self

    def get_params(self, deep=True):
        return {
            "model": self.model,
            "quad_points": self.quad_points,
            "n_starts": self.n_starts,
            "seed": self.seed,
            "rescale": self.rescale,
        }


class FactorScorer(_LatentTraitBase, TransformerMixin):
    """Transformer from item responses to empirical-Bayes latent scores.

    ``fit`` estimates the per-block measurement models; ``transform``
    returns one score column per latent variable.
    """

    def fit(self, X, y=None):
        data = _as_dataset(X)
        self.step1_ = fit_step1(self.model, data, self._rule(), self._options())
        return self

    def transform(self, X):
        data = _as_dataset(X)
        return score_matrix(self.step1_.specs, data, self.model, self._rule()).values
