"""Simulation designs: calibration of generating parameters and data
generation for the five study cases.

Every design has one structural regression V2 = beta0 + beta1 * V1 + e with
both variables standardized marginally.  The cases vary what is latent:

* case 1a/1b: observed covariate X (normal or +-1), latent response eta
* case 2a/2b: latent covariate eta, observed response Z (normal or skew)
* case 3: latent covariate eta1, latent response eta2

Items are binary with a common true intercept and loading per design,
calibrated from the item strength target (r2_y) and marginal item
probability (pi_y).  Because estimation fixes one anchor item to
intercept 0, loading 1, the estimand beta1 lives on the anchor scale and
depends on the generating loading; :func:`true_beta1` maps the design to
that target value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq
from scipy.special import expit

from .model import Dataset, JointModel, LatentBlock, MeasurementBlock, ResponseModel, StructuralSpec
from .quadrature import QuadratureRule, gauss_hermite, integrate_normal

__all__ = [
    "CellDesign",
    "TrueParams",
    "lambda_for_r2y",
    "tau_for_piy",
    "true_beta1",
    "skew_normal_sample",
    "gen_dataset",
    "model_for_design",
]

CASES = ("1a", "1b", "2a", "2b", "3")
_CASE_CODE = {"1a": 10, "1b": 11, "2a": 20, "2b": 21, "3": 30}
SKEW_SHAPE = 10.0  # implied skewness just under 1


@dataclass(frozen=True)
class CellDesign:
    """One simulation cell of the design grid."""

    case: str
    n: int
    p: int
    pi_y: float
    r2_y: float
    r2: float
    n_reps: int = 500
    seed: int = 0
    skew_shape: float = SKEW_SHAPE

    def __post_init__(self) -> None:
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}, got {self.case!r}")
        if not 0.0 < self.pi_y < 1.0:
            raise ValueError("pi_y must be in (0, 1)")
        if not 0.0 < self.r2_y < 1.0:
            raise ValueError("r2_y must be in (0, 1)")
        if not 0.0 <= self.r2 < 1.0:
            raise ValueError("r2 must be in [0, 1)")
        if self.n < 2 or self.p < 2:
            raise ValueError("need n >= 2 and p >= 2")


@dataclass(frozen=True)
class TrueParams:
    """Generating parameter values implied by a design."""

    lambda_dg: float
    tau_dg: float
    beta1_dg: float
    beta1_anchor: float
    resid_var: float
    skew_shape: float


def lambda_for_r2y(r2_y: float) -> float:
    """Common loading giving an underlying-variable R^2 of ``r2_y`` against
    the logistic variance pi^2 / 3."""
    if not 0.0 < r2_y < 1.0:
        raise ValueError("r2_y must be in (0, 1)")
    return float(np.sqrt(r2_y / (1.0 - r2_y) * np.pi**2 / 3.0))


def tau_for_piy(pi_y: float, lam: float, rule: QuadratureRule | None = None) -> float:
    """Common intercept giving marginal item probability ``pi_y`` for a
    standard-normal latent; solved to 1e-10."""
    if not 0.0 < pi_y < 1.0:
        raise ValueError("pi_y must be in (0, 1)")
    rule = rule if rule is not None else gauss_hermite(80)

    def marginal(tau):
        return integrate_normal(lambda e: expit(tau + lam * e), rule) - pi_y

    lo, hi = -1.0, 1.0
    while marginal(lo) > 0:
        lo *= 2.0
    while marginal(hi) < 0:
        hi *= 2.0
    return float(brentq(marginal, lo, hi, xtol=1e-10))


def true_beta1(case: str, r2: float, r2_y: float) -> float:
    """Target regression coefficient on the anchor-identified scale.

    Anchoring rescales a latent variable by the generating loading, so the
    estimand is the generating slope sqrt(r2) multiplied by the loading when
    the response is latent, divided by it when the covariate is latent, and
    unchanged when both are (the common loading cancels).
    """
    lam = lambda_for_r2y(r2_y)
    base = float(np.sqrt(r2))
    if case in ("1a", "1b"):
        return lam * base
    if case in ("2a", "2b"):
        return base / lam
    if case == "3":
        return base
    raise ValueError(f"unknown case {case!r}")


def skew_normal_sample(shape: float, mean, var, rng, size=None):
    """Skew-normal draws with the requested mean and variance exactly.

    Uses the two-normal representation delta|Z0| + sqrt(1-delta^2) Z1 and
    then standardizes by the closed-form first two moments.
    """
    var = np.asarray(var, float)
    if np.any(var <= 0):
        raise ValueError("var must be positive")
    if size is None:
        size = np.broadcast(np.asarray(mean), var).shape
    if shape == 0.0:
        return np.asarray(mean) + np.sqrt(var) * rng.standard_normal(size)
    delta = shape / np.sqrt(1.0 + shape**2)
    z0 = np.abs(rng.standard_normal(size))
    z1 = rng.standard_normal(size)
    raw = delta * z0 + np.sqrt(1.0 - delta**2) * z1
    raw_mean = delta * np.sqrt(2.0 / np.pi)
    raw_sd = np.sqrt(1.0 - 2.0 * delta**2 / np.pi)
    return np.asarray(mean) + np.sqrt(var) * (raw - raw_mean) / raw_sd


def _rng_for(design: CellDesign, rep_index: int):
    """Replicate-keyed stream: independent across cells and replicates and
    insensitive to execution order."""
    key = (design.seed, _CASE_CODE[design.case], design.n, design.p, rep_index)
    return np.random.default_rng(np.random.SeedSequence(key))


def _gen_items(eta, tau: float, lam: float, p: int, rng) -> NDArray[np.float64]:
    probs = expit(tau + lam * eta[:, None])
    return (rng.random((eta.size, p)) < probs).astype(float)


def true_params(design: CellDesign) -> TrueParams:
    lam = lambda_for_r2y(design.r2_y)
    tau = tau_for_piy(design.pi_y, lam)
    beta1 = float(np.sqrt(design.r2))
    return TrueParams(
        lambda_dg=lam,
        tau_dg=tau,
        beta1_dg=beta1,
        beta1_anchor=true_beta1(design.case, design.r2, design.r2_y),
        resid_var=1.0 - design.r2,
        skew_shape=design.skew_shape,
    )


def _gen_structural(design: CellDesign, params: TrueParams, rng):
    """Draw the structural pair (v1, v2) for one replicate."""
    n = design.n
    beta1, rvar = params.beta1_dg, params.resid_var
    if design.case == "1a":
        v1 = rng.standard_normal(n)
    elif design.case == "1b":
        v1 = 2.0 * (rng.random(n) < 0.5) - 1.0
    else:
        v1 = rng.standard_normal(n)
    if design.case == "2b":
        v2 = skew_normal_sample(design.skew_shape, beta1 * v1, rvar, rng)
    else:
        v2 = beta1 * v1 + np.sqrt(rvar) * rng.standard_normal(n)
    return v1, v2


def gen_dataset(design: CellDesign, rep_index: int) -> tuple[Dataset, TrueParams]:
    """Generate one replicate dataset; deterministic in (design, rep_index)."""
    params = true_params(design)
    rng = _rng_for(design, rep_index)
    p = design.p
    lam, tau = params.lambda_dg, params.tau_dg
    v1, v2 = _gen_structural(design, params, rng)
    if design.case in ("1a", "1b"):
        y = _gen_items(v2, tau, lam, p, rng)
        return Dataset(y=y, x=v1[:, None]), params
    if design.case in ("2a", "2b"):
        y = _gen_items(v1, tau, lam, p, rng)
        return Dataset(y=y, z=v2[:, None]), params
    y1 = _gen_items(v1, tau, lam, p, rng)
    y2 = _gen_items(v2, tau, lam, p, rng)
    return Dataset(y=np.hstack([y1, y2])), params


def model_for_design(design: CellDesign) -> JointModel:
    """Estimation template matching a design's case (anchor-identified)."""
    p = design.p

    def block(k: int) -> MeasurementBlock:
        return MeasurementBlock(k, np.zeros(p), np.ones(p))

    if design.case in ("1a", "1b"):
        structure = StructuralSpec((LatentBlock(members=(0,), x_vars=(0,)),))
        return JointModel(blocks=(block(0),), structure=structure)
    if design.case in ("2a", "2b"):
        structure = StructuralSpec(
            (LatentBlock(members=(0,)),),
            (ResponseModel(z_index=0, eta_vars=(0,)),),
        )
        return JointModel(blocks=(block(0),), structure=structure)
    structure = StructuralSpec(
        (LatentBlock(members=(0,)), LatentBlock(members=(1,), eta_vars=(0,)))
    )
    return JointModel(blocks=(block(0), block(1)), structure=structure)


def beta1_label(design: CellDesign) -> str:
    """Packed-parameter label of the target coefficient for a design."""
    if design.case in ("1a", "1b"):
        return "beta_x[eta0][x0]"
    if design.case in ("2a", "2b"):
        return "beta_eta[z0][eta0]"
    return "beta_eta[eta1][eta0]"


def write_dataset(data: Dataset, path, delimiter: str = "\t", missing: str = "NA") -> None:
    """Dump a dataset to delimited text with the standard column names."""
    cols = [f"y{j}" for j in range(data.y.shape[1])]
    parts = [data.y]
    if data.x is not None:
        cols += [f"x{j}" for j in range(data.x.shape[1])]
        parts.append(data.x)
    if data.z is not None:
        cols += [f"z{j}" for j in range(data.z.shape[1])]
        parts.append(data.z)
    mat = np.hstack(parts)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delimiter.join(cols) + "\n")
        for row in mat:
            fields = [missing if np.isnan(v) else repr(float(v)) for v in row]
            fh.write(delimiter.join(fields) + "\n")
