"""Empirical-Bayes factor scores and naive three-step estimation.

Scores are posterior means of each latent variable given its own items
under the step-1 model.  The naive third step substitutes them for the
latent variables and fits the structural equations by least squares,
treating the scores like observed data.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from .likelihood import Step1Spec, _collapse_rows, _expand_rows, _measurement_loglik_nodes
from .model import Dataset, JointModel, StructuralSpec
from .quadrature import NumericalError, QuadratureRule

__all__ = [
    "ScoreMatrix",
    "eb_score",
    "eb_scores",
    "rescale_scores",
    "naive_threestep",
    "ThreeStepResult",
]


@dataclass(frozen=True)
class ScoreMatrix:
    """Latent-variable predictions, one column per latent."""

    values: NDArray[np.float64]
    provenance: tuple[Step1Spec, ...]
    rescaled: bool = False
    target_variances: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, float)
        if values.ndim != 2 or values.shape[1] != len(self.provenance):
            raise ValueError("score matrix must be n x K with one spec per column")
        if not np.all(np.isfinite(values)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "values", values)

    def write_delimited(self, path, delimiter: str = "\t") -> None:
        """Dump scores with a header row (unit id + one column per latent)."""
        k = self.values.shape[1]
        header = ["unit"] + [f"eta{self.provenance[i].block.latent_index}" for i in range(k)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(delimiter.join(header) + "\n")
            for i, row in enumerate(self.values):
                fh.write(delimiter.join([str(i)] + [repr(float(v)) for v in row]) + "\n")


def eb_scores(spec: Step1Spec, data_k, rule: QuadratureRule) -> NDArray[np.float64]:
    """Posterior-mean scores for every row of one block's item matrix."""
    y = np.asarray(data_k, float)
    if not (~np.isnan(y)).any(axis=1).all():
        raise ValueError("every row needs at least one observed item")
    keep, _ = _collapse_rows(y)
    yc = y[keep]
    sd = float(np.sqrt(spec.sigma2))
    eta = spec.mu + sd * rule.nodes
    ll = _measurement_loglik_nodes(
        yc, spec.block.tau, spec.block.lam, np.broadcast_to(eta, (yc.shape[0], eta.size))
    )
    log_wl = np.log(rule.weights)[None, :] + ll
    m = np.max(log_wl, axis=1, keepdims=True)
    w = np.exp(log_wl - m)
    denom = w.sum(axis=1)
    if not np.all(denom > 0):
        bad = int(np.flatnonzero(denom <= 0)[0])
        raise NumericalError(f"posterior underflow at unit {bad}")
    scores = (w @ eta) / denom
    return _expand_rows(y, keep, scores[:, None])[:, 0]


def eb_score(spec: Step1Spec, y_row, rule: QuadratureRule) -> float:
    """Posterior mean of the latent given one unit's item responses."""
    return float(eb_scores(spec, np.atleast_2d(y_row), rule)[0])


def score_matrix(specs, data: Dataset, model: JointModel, rule: QuadratureRule) -> ScoreMatrix:
    slices = model.item_slices()
    cols = [eb_scores(spec, data.y[:, slices[i]], rule) for i, spec in enumerate(specs)]
    return ScoreMatrix(values=np.column_stack(cols), provenance=tuple(specs))


def rescale_scores(scores: ScoreMatrix, target_var) -> ScoreMatrix:
    """Multiply each column so its sample variance hits the target."""
    target = np.atleast_1d(np.asarray(target_var, float))
    sample = scores.values.var(axis=0)
    if np.any(sample <= 0):
        raise ValueError("cannot rescale a zero-variance score column")
    factors = np.sqrt(target / sample)
    return ScoreMatrix(
        values=scores.values * factors[None, :],
        provenance=scores.provenance,
        rescaled=True,
        target_variances=target,
    )


@dataclass(frozen=True)
class ThreeStepResult:
    """Naive three-step estimates with classical regression standard errors."""

    estimates: JointModel
    se_by_label: dict[str, float]
    scores: ScoreMatrix


def _build_design(n, x, scores, x_vars, eta_vars, latent_order):
    cols = [np.ones(n)]
    for xv in x_vars:
        cols.append(x[:, xv])
    for ev in eta_vars:
        cols.append(scores[:, latent_order.index(ev)])
    return np.column_stack(cols)


def fit_regressions(data: Dataset, model: JointModel, scores: ScoreMatrix):
    """Least-squares fits of every structural equation with scores for latents.

    Returns the filled StructuralSpec and a label -> se map for the
    regression coefficients (variance parameters get no naive se).
    """
    from .variance import naive_threestep_se

    latent_order = [spec.block.latent_index for spec in scores.provenance]
    sc = scores.values
    n = data.n
    x = data.x if data.x is not None else np.zeros((n, 0))
    new_blocks = []
    se: dict[str, float] = {}
    for lb in model.structure.latent_blocks:
        design = _build_design(n, x, sc, lb.x_vars, lb.eta_vars, latent_order)
        d = lb.dim
        coefs = np.empty((d, design.shape[1]))
        resid = np.empty((n, d))
        for i, lat in enumerate(lb.members):
            resp = sc[:, latent_order.index(lat)]
            beta, beta_se = naive_threestep_se(design, resp)
            coefs[i] = beta
            resid[:, i] = resp - design @ beta
            se[f"beta0[eta{lat}]"] = beta_se[0]
            for c, xv in enumerate(lb.x_vars):
                se[f"beta_x[eta{lat}][x{xv}]"] = beta_se[1 + c]
            for c, ev in enumerate(lb.eta_vars):
                se[f"beta_eta[eta{lat}][eta{ev}]"] = beta_se[1 + len(lb.x_vars) + c]
        psi = resid.T @ resid / n
        # guard against a numerically singular residual moment matrix
        psi = psi + 1e-10 * np.eye(d)
        new_blocks.append(
            replace(
                lb,
                beta0=coefs[:, 0],
                beta_x=coefs[:, 1 : 1 + len(lb.x_vars)],
                beta_eta=coefs[:, 1 + len(lb.x_vars) :],
                psi=psi,
            )
        )
    new_responses = []
    for rm in model.structure.response_models:
        z = data.z[:, rm.z_index]
        rows = ~np.isnan(z)
        design = _build_design(n, x, sc, rm.x_vars, rm.eta_vars, latent_order)[rows]
        beta, beta_se = naive_threestep_se(design, z[rows])
        resid = z[rows] - design @ beta
        se[f"intercept[z{rm.z_index}]"] = beta_se[0]
        for c, xv in enumerate(rm.x_vars):
            se[f"beta_x[z{rm.z_index}][x{xv}]"] = beta_se[1 + c]
        for c, ev in enumerate(rm.eta_vars):
            se[f"beta_eta[z{rm.z_index}][eta{ev}]"] = beta_se[1 + len(rm.x_vars) + c]
        new_responses.append(
            replace(
                rm,
                intercept=float(beta[0]),
                beta_x=beta[1 : 1 + len(rm.x_vars)],
                beta_eta=beta[1 + len(rm.x_vars) :],
                resid_var=float(resid @ resid / rows.sum()),
            )
        )
    return StructuralSpec(tuple(new_blocks), tuple(new_responses)), se


def naive_threestep(
    data: Dataset,
    model: JointModel,
    step1,
    rule: QuadratureRule,
    rescale: bool = False,
) -> ThreeStepResult:
    """Score every latent, optionally rescale, then regress.

    ``step1`` is a fitted step-1 result (or a sequence of Step1Spec).
    Rescaling targets the step-1 marginal latent variances.
    """
    specs = tuple(step1.specs if hasattr(step1, "specs") else step1)
    scores = score_matrix(specs, data, model, rule)
    if rescale:
        scores = rescale_scores(scores, [spec.sigma2 for spec in specs])
    structure, se = fit_regressions(data, model, scores)
    blocks = tuple(spec.block for spec in specs)
    return ThreeStepResult(
        estimates=JointModel(blocks=blocks, structure=structure),
        se_by_label=se,
        scores=scores,
    )
