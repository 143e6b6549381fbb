"""Standard errors for the one-step, two-step and naive three-step fits.

The two-step correction adds a first-stage term to the usual inverse
information: with per-unit information I22 for the structural parameters,
cross-information I12 between measurement and structural parameters, and a
covariance Sigma11 for the step-1 estimator,

    V = I22^-1 + I22^-1 I12' (n / n1 * Sigma11) I12 I22^-1,

and standard errors are sqrt(diag(V) / n).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import block_diag

from .likelihood import joint_loglik_grad, step1_pack
from .model import Dataset, JointModel, free_dim, pack, unpack
from .quadrature import NumericalError, QuadratureRule

__all__ = [
    "observed_info",
    "info_blocks",
    "sigma11",
    "twostep_variance",
    "VarianceDecomposition",
    "onestep_se",
    "naive_threestep_se",
]


def observed_info(grad_fun, theta, h_scale: float = 1e-4) -> NDArray[np.float64]:
    """Observed information as minus the symmetrized central-difference
    Jacobian of an analytic log-likelihood gradient."""
    theta = np.asarray(theta, float)
    dim = theta.size
    jac = np.empty((dim, dim))
    for j in range(dim):
        h = h_scale * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        jac[:, j] = (np.asarray(grad_fun(tp), float) - np.asarray(grad_fun(tm), float)) / (2.0 * h)
    if not np.all(np.isfinite(jac)):
        bad = np.argwhere(~np.isfinite(jac))[0]
        raise NumericalError(f"non-finite curvature at entry {tuple(bad)}")
    return -(jac + jac.T) / 2.0


@dataclass(frozen=True)
class InfoBlocks:
    """Per-unit joint observed information partitioned at the two-step fit."""

    i22: NDArray[np.float64]
    i12: NDArray[np.float64]
    full: NDArray[np.float64]


def info_blocks(model: JointModel, data: Dataset, rule: QuadratureRule) -> InfoBlocks:
    """Joint observed information per unit, split into the structural block
    I22 and the measurement-by-structural block I12."""
    theta = pack(model, "all")
    dim1 = free_dim(model, "measurement")

    def grad_fun(t):
        cand = unpack(t, model, "all")
        return joint_loglik_grad(cand, data, rule, which="all")[1]

    info = observed_info(grad_fun, theta) / data.n
    i22 = info[dim1:, dim1:]
    i12 = info[:dim1, dim1:]
    cond = np.linalg.cond(i22)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"structural information is singular (cond {cond:.2e})")
    return InfoBlocks(i22=i22, i12=i12, full=info)


def _block_theta1_cov(spec, info_k: NDArray[np.float64]) -> NDArray[np.float64]:
    """Asymptotic covariance of one block's measurement estimates: the
    matching sub-block of the inverse full step-1 information, so the free
    latent moments are profiled out rather than ignored."""
    dim = step1_pack(spec).size
    if info_k.shape != (dim, dim):
        raise ValueError("information matrix does not match the step-1 vector")
    cov = np.linalg.inv(info_k)
    if spec.identification == "anchor":
        keep = np.arange(dim - 2)  # measurement coords come first, then mu, log sd
    else:
        keep = np.arange(dim)
    return cov[np.ix_(keep, keep)]


def sigma11(step1, mode: str = "block_diagonal") -> NDArray[np.float64]:
    """Covariance (per unit of n1) of the stacked measurement estimates.

    ``block_diagonal`` ignores cross-block dependence.  ``score_crossblock``
    additionally estimates between-block score covariances from per-unit
    scores, which :func:`estimate.fit_step1` must have retained.
    """
    covs = [_block_theta1_cov(spec, info) for spec, info in zip(step1.specs, step1.info)]
    if mode == "block_diagonal":
        return block_diag(*covs)
    if mode != "score_crossblock":
        raise ValueError(f"unknown sigma11 mode {mode!r}")
    if step1.unit_scores is None:
        raise ValueError("score_crossblock needs per-unit scores from step 1")
    n1 = step1.n1
    inv_infos = [np.linalg.inv(info) for info in step1.info]
    k = len(step1.specs)
    dims = [step1_pack(spec).size for spec in step1.specs]
    offsets = np.concatenate([[0], np.cumsum(dims)])
    full = np.zeros((offsets[-1], offsets[-1]))
    for i in range(k):
        for j in range(k):
            b_ij = step1.unit_scores[i].T @ step1.unit_scores[j] / n1
            block = inv_infos[i] @ b_ij @ inv_infos[j]
            full[offsets[i] : offsets[i + 1], offsets[j] : offsets[j + 1]] = block
    keeps = []
    for spec, dim, off in zip(step1.specs, dims, offsets[:-1]):
        drop = 2 if spec.identification == "anchor" else 0
        keeps.extend(range(off, off + dim - drop))
    keeps = np.array(keeps)
    out = full[np.ix_(keeps, keeps)]
    return (out + out.T) / 2.0


@dataclass(frozen=True)
class VarianceDecomposition:
    """Corrected two-step covariance and its step-wise split.

    All matrices are asymptotic (per unit of n); ``se`` already divides by
    the sample size.  ``pct_step2`` reports what share of each diagonal
    entry the second step alone accounts for.
    """

    v: NDArray[np.float64]
    v_step2: NDArray[np.float64]
    v_step1: NDArray[np.float64]
    se: NDArray[np.float64]
    se_nostep1: NDArray[np.float64]
    pct_step2: NDArray[np.float64]
    n: int
    n1: int


def twostep_variance(
    blocks: "InfoBlocks",
    sigma11_mat: NDArray[np.float64],
    n: int,
    n1: int,
) -> VarianceDecomposition:
    """Assemble the corrected covariance from the information blocks and the
    step-1 covariance; see the module docstring for the formula."""
    v2 = np.linalg.inv(blocks.i22)
    i12 = blocks.i12
    scale = float(n) / float(n1)
    v1 = v2 @ i12.T @ (scale * sigma11_mat) @ i12 @ v2
    v = v2 + v1
    diag = np.diag(v)
    if np.any(diag <= 0):
        raise NumericalError("corrected variance has a non-positive diagonal")
    return VarianceDecomposition(
        v=v,
        v_step2=v2,
        v_step1=v1,
        se=np.sqrt(diag / n),
        se_nostep1=np.sqrt(np.diag(v2) / n),
        pct_step2=100.0 * np.diag(v2) / diag,
        n=n,
        n1=n1,
    )


def onestep_se(model: JointModel, data: Dataset, rule: QuadratureRule) -> NDArray[np.float64]:
    """Classical information-based standard errors for the one-step fit,
    ordered like ``pack(model, "all")``."""
    theta = pack(model, "all")

    def grad_fun(t):
        cand = unpack(t, model, "all")
        return joint_loglik_grad(cand, data, rule, which="all")[1]

    info = observed_info(grad_fun, theta)
    cov = np.linalg.inv(info)
    diag = np.diag(cov)
    if np.any(diag <= 0):
        raise NumericalError("observed information is not positive definite")
    return np.sqrt(diag)


def naive_threestep_se(design: NDArray[np.float64], response: NDArray[np.float64]):
    """Ordinary least squares with classical standard errors.

    Returns ``(coef, se)``; the error variance uses the degrees-of-freedom
    corrected residual sum of squares.
    """
    design = np.asarray(design, float)
    response = np.asarray(response, float)
    n, p = design.shape
    if n <= p:
        raise ValueError("need more rows than regressors")
    coef, _, rank, _ = np.linalg.lstsq(design, response, rcond=None)
    if rank < p:
        raise ValueError("design matrix is rank deficient")
    resid = response - design @ coef
    s2 = float(resid @ resid) / (n - p)
    cov = s2 * np.linalg.inv(design.T @ design)
    return coef, np.sqrt(np.diag(cov))
