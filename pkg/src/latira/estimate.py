"""Maximum-likelihood drivers: step 1, step 2 and the one-step fit.

All fits maximize a quadrature-approximated marginal log-likelihood over an
unconstrained parameter vector with L-BFGS, using analytic gradients and
multistart around a warm start.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize

from .likelihood import (
    Step1Spec,
    joint_loglik_grad,
    step1_loglik_grad,
    step1_pack,
    step1_unpack,
    step2_loglik_grad,
)
from .model import Dataset, JointModel, free_dim, pack, pack_labels, unpack
from .quadrature import NumericalError, QuadratureRule, gauss_hermite

__all__ = [
    "OptOptions",
    "FitResult",
    "Step1Result",
    "maximize",
    "fit_step1",
    "fit_step2",
    "fit_onestep",
]

LOADING_BOUND = 50.0  # |loading| cap; a quasi-separation guard


@dataclass(frozen=True)
class OptOptions:
    """Knobs for the multistart L-BFGS maximizer."""

    max_iter: int = 500
    grad_tol: float = 1e-5
    rel_f_tol: float = 1e-10
    n_starts: int = 10
    jitter_sd: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class FitResult:
    """Outcome of one maximization."""

    theta: NDArray[np.float64]
    loglik: float
    converged: bool
    n_iter: int
    start_index: int
    gradient_norm: float
    message: str = ""


def maximize(fun_grad, theta0, options: OptOptions, bounds=None, scale: float = 1.0) -> FitResult:
    """Multistart L-BFGS maximization of ``fun_grad`` (returns value, grad).

    The first start is ``theta0`` itself; the rest jitter it with normal
    noise.  Starts that raise a numerical error are skipped.  The result is
    never worse than the best evaluated start point.  ``scale`` (typically
    the sample size when the objective is a sum of unit terms) converts the
    gradient tolerance to the objective's scale: convergence means
    ``max|grad| < grad_tol * scale``.
    """
    theta0 = np.asarray(theta0, float)
    scale = max(float(scale), 1.0)
    rng = np.random.default_rng(options.seed)

    def neg(theta):
        value, grad = fun_grad(theta)
        return -value, -np.asarray(grad, float)

    best = None
    for s in range(options.n_starts):
        start = theta0 if s == 0 else theta0 + options.jitter_sd * rng.standard_normal(theta0.size)
        if bounds is not None:
            start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            res = minimize(
                neg,
                start,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={
                    "maxiter": options.max_iter,
                    "gtol": options.grad_tol * scale,
                    "ftol": options.rel_f_tol,
                },
            )
        except NumericalError:
            continue
        cand = FitResult(
            theta=np.asarray(res.x, float),
            loglik=float(-res.fun),
            converged=False,
            n_iter=int(res.nit),
            start_index=s,
            gradient_norm=float(np.max(np.abs(res.jac))),
            message=str(res.message),
        )
        if best is None or cand.loglik > best.loglik:
            best = cand
    if best is None:
        raise NumericalError("all optimization starts failed")
    try:
        v0, _ = fun_grad(theta0)
    except NumericalError:
        v0 = -np.inf
    if v0 > best.loglik:
        value, grad = fun_grad(theta0)
        best = FitResult(
            theta=theta0.copy(),
            loglik=float(value),
            converged=False,
            n_iter=0,
            start_index=-1,
            gradient_norm=float(np.max(np.abs(grad))),
            message="no start improved on the initial point",
        )
    converged = best.gradient_norm < options.grad_tol * scale
    return replace(best, converged=converged)


@dataclass(frozen=True)
class Step1Result:
    """Fitted per-block measurement models and their information matrices.

    ``info`` holds one observed information matrix (per unit of sample size)
    per block, over that block's full step-1 free vector.  ``unit_scores``
    optionally keeps per-unit score rows for cross-block covariance work.
    """

    specs: tuple[Step1Spec, ...]
    logliks: tuple[float, ...]
    fits: tuple[FitResult, ...]
    info: tuple[NDArray[np.float64], ...]
    n1: int
    rule_points: int
    unit_scores: tuple[NDArray[np.float64], ...] | None = None

    @property
    def blocks(self):
        return tuple(spec.block for spec in self.specs)

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.fits)


def _step1_start(block, data_k) -> Step1Spec:
    """Moment-style start: item log-odds for intercepts, unit loadings."""
    p_hat = np.nanmean(np.asarray(data_k, float), axis=0)
    p_hat = np.clip(p_hat, 0.02, 0.98)
    tau = np.log(p_hat / (1.0 - p_hat))
    start = replace(block, tau=tau, lam=np.ones(block.n_items))
    return Step1Spec(start.with_anchor_imposed(), mu=0.0, sigma2=1.0)


def _step1_bounds(template: Step1Spec) -> list[tuple[float, float]]:
    dim = step1_pack(template).size
    bounds = [(-LOADING_BOUND, LOADING_BOUND)] * dim
    return bounds


def fit_step1(
    model: JointModel,
    data: Dataset,
    rule: QuadratureRule | None = None,
    options: OptOptions | None = None,
    identification: str = "anchor",
    unit_scores: bool = False,
) -> Step1Result:
    """Fit each block's measurement model separately.

    Blocks are independent given their own items, so each one is a small
    marginal-likelihood problem.  Per-block observed information matrices
    (divided by n) are computed for downstream variance corrections.
    """
    from .variance import observed_info

    rule = rule if rule is not None else gauss_hermite(21)
    options = options if options is not None else OptOptions()
    slices = model.item_slices()
    specs = []
    logliks = []
    fits = []
    infos = []
    scores = [] if unit_scores else None
    n = data.n
    for i, block in enumerate(model.blocks):
        data_k = data.y[:, slices[i]]
        start = _step1_start(block, data_k)
        if identification == "standardized":
            start = Step1Spec(start.block, 0.0, 1.0, "standardized")
        template = start

        def fun_grad(theta, template=template, data_k=data_k):
            spec = step1_unpack(theta, template)
            value, grad = step1_loglik_grad(spec, data_k, rule)
            return value, grad

        fit = maximize(fun_grad, step1_pack(template), options,
                       bounds=_step1_bounds(template), scale=n)
        spec_hat = step1_unpack(fit.theta, template)
        out = step1_loglik_grad(spec_hat, data_k, rule, unit_scores=unit_scores)
        info = observed_info(
            lambda t, template=template, data_k=data_k: step1_loglik_grad(
                step1_unpack(t, template), data_k, rule
            )[1],
            fit.theta,
        ) / n
        specs.append(spec_hat)
        logliks.append(fit.loglik)
        fits.append(fit)
        infos.append(info)
        if unit_scores:
            scores.append(out[2])
    return Step1Result(
        specs=tuple(specs),
        logliks=tuple(logliks),
        fits=tuple(fits),
        info=tuple(infos),
        n1=n,
        rule_points=rule.n_points,
        unit_scores=None if scores is None else tuple(scores),
    )


def _structural_start(model: JointModel, data: Dataset, step1, rule) -> JointModel:
    """Warm start for the structural parameters from regressions on
    empirical-Bayes scores."""
    from .threestep import naive_threestep

    try:
        three = naive_threestep(data, model, step1, rule)
    except (NumericalError, ValueError, np.linalg.LinAlgError):
        return model
    candidate = JointModel(blocks=model.blocks, structure=three.estimates.structure)
    try:
        pack(candidate, "structural")
    except np.linalg.LinAlgError:
        return model
    return candidate


def fit_step2(
    model: JointModel,
    data: Dataset,
    step1,
    rule: QuadratureRule | None = None,
    options: OptOptions | None = None,
) -> tuple[JointModel, FitResult]:
    """Maximize the joint likelihood over structural parameters only.

    ``step1`` is a :class:`Step1Result` or a sequence of measurement blocks;
    measurement parameters are carried over untouched.  Returns the combined
    fitted model and the optimizer report for the structural stage.
    """
    rule = rule if rule is not None else gauss_hermite(21)
    options = options if options is not None else OptOptions()
    blocks = tuple(step1.blocks if hasattr(step1, "blocks") else step1)
    if len(blocks) != len(model.blocks):
        raise ValueError("step-1 result does not match the model's block count")
    template = JointModel(blocks=blocks, structure=model.structure)
    warm = template
    if hasattr(step1, "specs"):
        warm = _structural_start(template, data, step1, rule)

    def fun_grad(theta2):
        return step2_loglik_grad(theta2, blocks, template, data, rule)

    fit = maximize(fun_grad, pack(warm, "structural"), options, scale=data.n)
    fitted = unpack(fit.theta, template, "structural")
    fitted = JointModel(blocks=blocks, structure=fitted.structure)
    return fitted, fit


def fit_onestep(
    model: JointModel,
    data: Dataset,
    rule: QuadratureRule | None = None,
    options: OptOptions | None = None,
    warm_start: JointModel | None = None,
) -> tuple[JointModel, FitResult]:
    """Maximize the joint likelihood over all free parameters at once.

    ``warm_start`` (for example a two-step fit) seeds the first optimizer
    start; otherwise moment-style measurement starts are used.
    """
    rule = rule if rule is not None else gauss_hermite(21)
    options = options if options is not None else OptOptions()
    if warm_start is None:
        slices = model.item_slices()
        blocks = tuple(
            _step1_start(b, data.y[:, slices[i]]).block for i, b in enumerate(model.blocks)
        )
        warm_start = JointModel(blocks=blocks, structure=model.structure)

    def fun_grad(theta):
        cand = unpack(theta, model, "all")
        return joint_loglik_grad(cand, data, rule, which="all")

    n_meas = free_dim(model, "measurement")
    n_all = free_dim(model, "all")
    labels = pack_labels(model, "all")
    bounds = []
    for j in range(n_all):
        if j < n_meas and labels[j].startswith("lam"):
            bounds.append((-LOADING_BOUND, LOADING_BOUND))
        else:
            bounds.append((-np.inf, np.inf))
    fit = maximize(fun_grad, pack(warm_start, "all"), options, bounds=bounds, scale=data.n)
    return unpack(fit.theta, model, "all"), fit
