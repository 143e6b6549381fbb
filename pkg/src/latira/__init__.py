"""Latent trait structural models: stepwise and joint estimation.

Binary items follow a two-parameter logistic measurement model; the latent
variables follow a recursive Gaussian structural model with optional
observed covariates and continuous responses.  The package provides

* one-step joint maximum likelihood,
* two-step pseudo maximum likelihood with corrected standard errors,
* a naive three-step estimator based on empirical-Bayes factor scores,
* a Monte Carlo harness for comparing the three, and
* a ``latira`` command line front end.
"""
from .estimate import OptOptions, Step1Result, fit_onestep, fit_step1, fit_step2
from .estimators import (
    FactorScorer,
    NaiveThreeStepEstimator,
    OneStepEstimator,
    TwoStepEstimator,
)
from .likelihood import Step1Spec, joint_loglik, step1_loglik, step2_loglik
from .model import (
    Dataset,
    JointModel,
    LatentBlock,
    MeasurementBlock,
    ResponseModel,
    StructuralSpec,
    pack,
    pack_labels,
    unpack,
    validate,
)
from .quadrature import NumericalError, QuadratureRule, gauss_hermite, integrate_normal
from .simgen import CellDesign, gen_dataset, model_for_design
from .simharness import CellSummary, HarnessOptions, emit_table, run_cell, run_grid
from .threestep import ScoreMatrix, eb_scores, naive_threestep
from .variance import onestep_se, sigma11, twostep_variance

__version__ = "0.1.0"

__all__ = [
    "CellDesign",
    "CellSummary",
    "Dataset",
    "FactorScorer",
    "HarnessOptions",
    "JointModel",
    "LatentBlock",
    "MeasurementBlock",
    "NaiveThreeStepEstimator",
    "NumericalError",
    "OneStepEstimator",
    "OptOptions",
    "QuadratureRule",
    "ResponseModel",
    "ScoreMatrix",
    "Step1Result",
    "Step1Spec",
    "StructuralSpec",
    "TwoStepEstimator",
    "eb_scores",
    "emit_table",
    "fit_onestep",
    "fit_step1",
    "fit_step2",
    "gauss_hermite",
    "gen_dataset",
    "integrate_normal",
    "joint_loglik",
    "model_for_design",
    "naive_threestep",
    "onestep_se",
    "pack",
    "pack_labels",
    "run_cell",
    "run_grid",
    "sigma11",
    "step1_loglik",
    "step2_loglik",
    "twostep_variance",
    "unpack",
    "validate",
]
