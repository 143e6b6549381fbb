"""Log-likelihoods and their analytic gradients.

Three objectives share one quadrature-based code path: the per-block step-1
likelihood, the joint likelihood of all parameters, and the step-2
likelihood with measurement parameters frozen.  Latent variables are
integrated out against the model-implied conditional Gaussian given the
covariates, via an affine transform of a standard-normal product rule.

Gradients differentiate the quadrature approximation exactly: measurement
parameters through posterior-weighted complete-data scores, structural
parameters additionally through the dependence of the transformed nodes on
the implied mean and Cholesky factor.  This keeps the gradient consistent
with finite differences of the evaluated objective at any rule size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logsumexp

from .model import (
    Dataset,
    JointModel,
    MeasurementBlock,
    StructuralSpec,
    _free_loading_groups,
    _pack_block,
    free_dim,
    params_to_chol,
    unpack,
)
from .quadrature import NumericalError, QuadratureRule, product_nodes

__all__ = [
    "Step1Spec",
    "item_logprob",
    "step1_loglik",
    "step1_loglik_grad",
    "joint_loglik",
    "joint_loglik_grad",
    "step2_loglik",
    "step2_loglik_grad",
    "implied_gaussian",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_CSTEP = 1e-100  # complex-step size; derivative error is O(h^2) ~ exactly 0 here


def item_logprob(tau, lam, eta, y):
    """Bernoulli log-probability under the 2-PL logit model, overflow-safe."""
    theta = tau + lam * np.asarray(eta, float)
    return np.asarray(y, float) * theta - np.logaddexp(0.0, theta)


# ---------------------------------------------------------------------------
# Step-1 model


@dataclass(frozen=True)
class Step1Spec:
    """One block's measurement model with a free latent N(mu, sigma2).

    ``identification`` selects the free-parameter layout: "anchor" keeps the
    anchor item fixed and frees (mu, sigma2); "standardized" fixes the latent
    to N(0, 1) and frees all item parameters.
    """

    block: MeasurementBlock
    mu: float = 0.0
    sigma2: float = 1.0
    identification: str = "anchor"

    def __post_init__(self) -> None:
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.identification not in ("anchor", "standardized"):
            raise ValueError(f"unknown identification {self.identification!r}")


def step1_pack(spec: Step1Spec) -> NDArray[np.float64]:
    """Free parameters of the step-1 model as an unconstrained vector."""
    if spec.identification == "anchor":
        return np.array(
            _pack_block(spec.block) + [spec.mu, 0.5 * np.log(spec.sigma2)]
        )
    block = spec.block
    groups = block.groups()
    out = list(block.tau)
    seen: list[int] = []
    for j, g in enumerate(groups):
        if g not in seen:
            seen.append(g)
            out.append(block.lam[j])
    return np.array(out, dtype=np.float64)


def step1_unpack(vec, template: Step1Spec) -> Step1Spec:
    vec = np.asarray(vec, float)
    block = template.block
    if template.identification == "anchor":
        from .model import _unpack_block

        new_block, pos = _unpack_block(block, vec, 0)
        mu = float(vec[pos])
        sigma2 = float(np.exp(2.0 * vec[pos + 1]))
        if pos + 2 != vec.size:
            raise ValueError("step-1 vector length mismatch")
        return Step1Spec(new_block, mu, sigma2, "anchor")
    p = block.n_items
    tau = vec[:p]
    groups = block.groups()
    seen: list[int] = []
    lam_by_group = {}
    pos = p
    for g in groups:
        if g not in seen:
            seen.append(g)
            lam_by_group[g] = vec[pos]
            pos += 1
    if pos != vec.size:
        raise ValueError("step-1 vector length mismatch")
    lam = np.array([lam_by_group[g] for g in groups])
    from dataclasses import replace

    return Step1Spec(replace(block, tau=tau, lam=lam), 0.0, 1.0, "standardized")


def _collapse_rows(*arrays):
    """Unique joint rows with multiplicities; NaN entries are recoded so that
    identical missingness patterns collapse together."""
    parts = []
    for arr in arrays:
        if arr is None:
            continue
        a = np.array(arr, float)
        a[np.isnan(a)] = np.inf  # stable sentinel for np.unique
        parts.append(a)
    stacked = np.hstack(parts)
    _, first, counts = np.unique(
        stacked, axis=0, return_index=True, return_counts=True
    )
    return first, counts.astype(float)


def _measurement_loglik_nodes(y, tau, lam, eta):
    """Sum over a block's items of observed-item log-probabilities.

    y: (n, p) with NaN missing; eta: (n, Q).  Returns (n, Q).
    """
    n, q = eta.shape
    out = np.zeros((n, q))
    for j in range(y.shape[1]):
        yj = y[:, j]
        obs = ~np.isnan(yj)
        if not obs.any():
            continue
        theta = tau[j] + lam[j] * eta[obs]
        contrib = yj[obs, None] * theta - np.logaddexp(0.0, theta)
        out[obs] += contrib
    return out


def _unit_logliks(log_w, ll_nodes):
    unit_ll = logsumexp(log_w[None, :] + ll_nodes, axis=1)
    if not np.all(np.isfinite(unit_ll)):
        bad = int(np.flatnonzero(~np.isfinite(unit_ll))[0])
        raise NumericalError(f"marginal probability underflow at unit {bad}")
    return unit_ll


def step1_loglik(spec: Step1Spec, data_k, rule: QuadratureRule) -> float:
    """Marginal log-likelihood of one block's items, latent integrated out."""
    value, _ = _step1_core(spec, data_k, rule, want_grad=False)
    return value


def step1_loglik_grad(spec: Step1Spec, data_k, rule: QuadratureRule, unit_scores: bool = False):
    """Log-likelihood, gradient over the step-1 free vector, and optionally
    per-unit score rows (n, dim)."""
    return _step1_core(spec, data_k, rule, want_grad=True, unit_scores=unit_scores)


def _step1_core(spec: Step1Spec, data_k, rule, want_grad: bool, unit_scores: bool = False):
    y = np.asarray(data_k, float)
    if y.ndim != 2 or y.shape[1] != spec.block.n_items:
        raise ValueError("data_k columns must match the block's items")
    if not (~np.isnan(y)).any(axis=1).all():
        raise ValueError("every row needs at least one observed item")
    keep, counts = _collapse_rows(y)
    yc = y[keep]
    block = spec.block
    sd = float(np.sqrt(spec.sigma2))
    eta = spec.mu + sd * rule.nodes  # (Q,)
    eta_nodes = np.broadcast_to(eta, (yc.shape[0], eta.size))
    ll_nodes = _measurement_loglik_nodes(yc, block.tau, block.lam, eta_nodes)
    log_w = np.log(rule.weights)
    unit_ll = _unit_logliks(log_w, ll_nodes)
    value = float(counts @ unit_ll)
    if not want_grad:
        return value, None

    pw = np.exp(log_w[None, :] + ll_nodes - unit_ll[:, None])  # (nc, Q)
    groups = block.groups()
    cols: list[NDArray] = []
    resid = {}
    for j in range(block.n_items):
        yj = yc[:, j]
        obs = ~np.isnan(yj)
        theta = block.tau[j] + block.lam[j] * eta
        r = np.where(obs[:, None], np.nan_to_num(yj)[:, None] - expit(theta)[None, :], 0.0)
        resid[j] = r
    if spec.identification == "anchor":
        for j in range(block.n_items):
            if j != block.anchor_item:
                cols.append(np.sum(pw * resid[j], axis=1))
        for g in _free_loading_groups(block):
            acc = np.zeros(yc.shape[0])
            for j, gj in enumerate(groups):
                if gj == g:
                    acc += np.sum(pw * resid[j] * eta[None, :], axis=1)
            cols.append(acc)
        # node positions mu + sd * u depend on (mu, log sd)
        gzeta = np.zeros((yc.shape[0], eta.size))
        for j in range(block.n_items):
            gzeta += block.lam[j] * resid[j]
        cols.append(np.sum(pw * gzeta, axis=1))
        cols.append(np.sum(pw * gzeta * (sd * rule.nodes)[None, :], axis=1))
    else:
        for j in range(block.n_items):
            cols.append(np.sum(pw * resid[j], axis=1))
        seen: list[int] = []
        for g in groups:
            if g in seen:
                continue
            seen.append(g)
            acc = np.zeros(yc.shape[0])
            for j, gj in enumerate(groups):
                if gj == g:
                    acc += np.sum(pw * resid[j] * eta[None, :], axis=1)
            cols.append(acc)
    score_rows = np.column_stack(cols)
    grad = counts @ score_rows
    if unit_scores:
        # expand collapsed rows back to one score per original unit
        full = _expand_rows(y, keep, score_rows)
        return value, grad, full
    return value, grad


def _expand_rows(original, keep, collapsed_values):
    # np.unique sorts rows identically here and in _collapse_rows, so the
    # inverse ids index collapsed rows in `keep` order.
    a = np.array(original, float)
    a[np.isnan(a)] = np.inf
    _, inverse = np.unique(a, axis=0, return_inverse=True)
    return collapsed_values[inverse]


# ---------------------------------------------------------------------------
# Implied Gaussian of the full latent vector given covariates


def _chol_nopivot(mat):
    """Unpivoted lower Cholesky valid for complex-step inputs (no conjugation)."""
    d = mat.shape[0]
    chol = np.zeros_like(mat)
    for i in range(d):
        for j in range(i):
            chol[i, j] = (mat[i, j] - chol[i, : j] @ chol[j, : j]) / chol[j, j]
        diag = mat[i, i] - chol[i, : i] @ chol[i, : i]
        chol[i, i] = np.sqrt(diag)
    return chol


def _structural_flat(theta2, spec: StructuralSpec, n_x: int, n_latent: int):
    """Map the flat structural vector to the implied quantities the likelihood
    needs: mean intercept a (K,), mean slope B (K, n_x), Cholesky L (K, K) of
    the implied latent covariance, and natural response-model parameters.

    Written dtype-generically so a complex step through it yields exact
    derivatives.  Returns one flat array; see ``_structural_slices``.
    """
    theta2 = np.asarray(theta2)
    dtype = theta2.dtype
    k = n_latent
    a = np.zeros(k, dtype=dtype)
    b_x = np.zeros((k, n_x), dtype=dtype)
    cov = np.zeros((k, k), dtype=dtype)
    pos = 0
    for m, lb in enumerate(spec.latent_blocks):
        d = lb.dim
        idx = list(lb.members)
        beta0 = theta2[pos : pos + d]
        pos += d
        nx = len(lb.x_vars)
        beta_x = theta2[pos : pos + d * nx].reshape(d, nx)
        pos += d * nx
        ne = len(lb.eta_vars)
        beta_eta = theta2[pos : pos + d * ne].reshape(d, ne)
        pos += d * ne
        chol_psi, pos = params_to_chol(theta2, d, pos)
        psi = chol_psi @ chol_psi.T
        ev = list(lb.eta_vars)
        a[idx] = beta0 + (beta_eta @ a[ev] if ne else 0.0)
        if nx:
            b_x[np.ix_(idx, list(lb.x_vars))] += beta_x
        if ne:
            b_x[idx, :] += beta_eta @ b_x[ev, :]
            cov[np.ix_(idx, idx)] = beta_eta @ cov[np.ix_(ev, ev)] @ beta_eta.T + psi
            prev = [i for blk in spec.latent_blocks[:m] for i in blk.members]
            cross = beta_eta @ cov[np.ix_(ev, prev)]
            cov[np.ix_(idx, prev)] = cross
            cov[np.ix_(prev, idx)] = cross.T
        else:
            cov[np.ix_(idx, idx)] = psi
    chol = _chol_nopivot(cov)
    resp: list = []
    for rm in spec.response_models:
        resp.append(theta2[pos])  # intercept
        pos += 1
        nx = len(rm.x_vars)
        resp.extend(theta2[pos : pos + nx])
        pos += nx
        ne = len(rm.eta_vars)
        resp.extend(theta2[pos : pos + ne])
        pos += ne
        resp.append(np.exp(2.0 * theta2[pos]))  # residual variance
        pos += 1
    return np.concatenate([a, b_x.ravel(), chol.ravel(), np.array(resp, dtype=dtype)])


def _structural_slices(spec: StructuralSpec, n_x: int, n_latent: int):
    k = n_latent
    s_a = slice(0, k)
    s_b = slice(k, k + k * n_x)
    s_l = slice(s_b.stop, s_b.stop + k * k)
    pos = s_l.stop
    s_resp = []
    for rm in spec.response_models:
        width = 2 + len(rm.x_vars) + len(rm.eta_vars)
        s_resp.append(slice(pos, pos + width))
        pos += width
    return s_a, s_b, s_l, s_resp


def implied_gaussian(spec: StructuralSpec, n_x: int, n_latent: int):
    """Mean intercept/slope and covariance of the full latent vector given X."""
    from .model import _pack_structural

    theta2 = np.array(_pack_structural(spec))
    flat = _structural_flat(theta2, spec, n_x, n_latent)
    s_a, s_b, s_l, _ = _structural_slices(spec, n_x, n_latent)
    k = n_latent
    a = flat[s_a].real
    b_x = flat[s_b].real.reshape(k, n_x)
    chol = flat[s_l].real.reshape(k, k)
    return a, b_x, chol @ chol.T


# ---------------------------------------------------------------------------
# Joint likelihood


def joint_loglik(model: JointModel, data: Dataset, rule: QuadratureRule) -> float:
    """Joint marginal log-likelihood of items and responses given covariates."""
    theta = _model_theta(model)
    value, _ = _joint_core(theta, model, data, rule, grad_which=None)
    return value


def joint_loglik_grad(model: JointModel, data: Dataset, rule: QuadratureRule,
                      which: str = "all", unit_scores: bool = False):
    """Joint log-likelihood with its gradient over ``pack(model, which)``."""
    theta = _model_theta(model)
    return _joint_core(theta, model, data, rule, grad_which=which, unit_scores=unit_scores)


def step2_loglik(theta2, fixed_blocks, template: JointModel, data: Dataset,
                 rule: QuadratureRule) -> float:
    """Joint log-likelihood over structural parameters with the measurement
    model frozen at ``fixed_blocks``."""
    model = _with_frozen_measurement(theta2, fixed_blocks, template)
    return joint_loglik(model, data, rule)


def step2_loglik_grad(theta2, fixed_blocks, template: JointModel, data: Dataset,
                      rule: QuadratureRule, unit_scores: bool = False):
    model = _with_frozen_measurement(theta2, fixed_blocks, template)
    return joint_loglik_grad(model, data, rule, which="structural", unit_scores=unit_scores)


def _with_frozen_measurement(theta2, fixed_blocks, template: JointModel) -> JointModel:
    theta2 = np.asarray(theta2, float)
    if theta2.size != free_dim(template, "structural"):
        raise ValueError("structural vector length mismatch")
    model = unpack(theta2, template, "structural")
    return JointModel(blocks=tuple(fixed_blocks), structure=model.structure)


def _model_theta(model: JointModel) -> NDArray[np.float64]:
    from .model import pack

    return pack(model, "all")


def _joint_core(theta, model: JointModel, data: Dataset, rule: QuadratureRule,
                grad_which: str | None, unit_scores: bool = False):
    spec = model.structure
    k = model.n_latent
    n_x = data.n_x
    dim1 = free_dim(model, "measurement")
    theta2 = theta[dim1:]

    flat = _structural_flat(theta2, spec, n_x, k)
    s_a, s_b, s_l, s_resp = _structural_slices(spec, n_x, k)
    a = flat[s_a]
    b_x = flat[s_b].reshape(k, n_x)
    chol = flat[s_l].reshape(k, k)
    resp_nat = [flat[s] for s in s_resp]

    if spec.response_models and data.z is None:
        raise ValueError("model has response equations but data has no z matrix")
    collapsible = data.x is None and data.z is None
    if collapsible:
        keep, counts = _collapse_rows(data.y)
    else:
        keep, counts = np.arange(data.n), np.ones(data.n)
    yc = data.y[keep]
    xc = data.x[keep] if data.x is not None else np.zeros((keep.size, 0))
    zc = data.z[keep] if data.z is not None else None
    nc = keep.size

    nodes_u, weights = product_nodes(rule, k)  # (Q, k), (Q,)
    q = nodes_u.shape[0]
    mean = a[None, :] + xc @ b_x.T  # (nc, k)
    shift = nodes_u @ chol.T  # (Q, k)
    eta = mean[:, None, :] + shift[None, :, :]  # (nc, Q, k)

    ll = np.zeros((nc, q))
    slices = model.item_slices()
    for b_i, block in enumerate(model.blocks):
        ll += _measurement_loglik_nodes(
            yc[:, slices[b_i]], block.tau, block.lam, eta[:, :, block.latent_index]
        )
    for r_i, rm in enumerate(spec.response_models):
        pars = resp_nat[r_i]
        nxr, ner = len(rm.x_vars), len(rm.eta_vars)
        intercept, bx = pars[0], pars[1 : 1 + nxr]
        be, s2 = pars[1 + nxr : 1 + nxr + ner], pars[-1]
        zr = zc[:, rm.z_index]
        obs = ~np.isnan(zr)
        if not obs.any():
            continue
        mz = intercept + xc[obs][:, list(rm.x_vars)] @ bx  # (no,)
        mz = mz[:, None] + np.einsum("nqe,e->nq", eta[obs][:, :, list(rm.eta_vars)], be)
        dev = np.nan_to_num(zr[obs])[:, None] - mz
        ll[obs] += -0.5 * (_LOG_2PI + np.log(s2)) - dev**2 / (2.0 * s2)

    log_w = np.log(weights)
    unit_ll = _unit_logliks(log_w, ll)
    value = float(counts @ unit_ll)
    if grad_which is None:
        return value, None

    pw = np.exp(log_w[None, :] + ll - unit_ll[:, None])  # (nc, Q)
    cols: list[NDArray] = []

    # item residuals y - p at the nodes, shared by both gradient sections
    block_resid: list[dict[int, NDArray]] = []
    for b_i, block in enumerate(model.blocks):
        e_k = eta[:, :, block.latent_index]
        yb = yc[:, slices[b_i]]
        resid = {}
        for j in range(block.n_items):
            yj = yb[:, j]
            obs = ~np.isnan(yj)
            t = block.tau[j] + block.lam[j] * e_k
            resid[j] = np.where(obs[:, None], np.nan_to_num(yj)[:, None] - expit(t), 0.0)
        block_resid.append(resid)

    if grad_which in ("measurement", "all"):
        for b_i, block in enumerate(model.blocks):
            e_k = eta[:, :, block.latent_index]
            groups = block.groups()
            resid = block_resid[b_i]
            for j in range(block.n_items):
                if j != block.anchor_item:
                    cols.append(np.sum(pw * resid[j], axis=1))
            for g in _free_loading_groups(block):
                acc = np.zeros(nc)
                for j, gj in enumerate(groups):
                    if gj == g:
                        acc += np.sum(pw * resid[j] * e_k, axis=1)
                cols.append(acc)

    if grad_which in ("structural", "all"):
        # d(loglik)/d eta at the nodes, for the node-shift chain rule
        gzeta = np.zeros((nc, q, k))
        for b_i, block in enumerate(model.blocks):
            resid = block_resid[b_i]
            for j in range(block.n_items):
                gzeta[:, :, block.latent_index] += block.lam[j] * resid[j]
        resp_dev = []
        for r_i, rm in enumerate(spec.response_models):
            pars = resp_nat[r_i]
            nxr, ner = len(rm.x_vars), len(rm.eta_vars)
            intercept, bx = pars[0], pars[1 : 1 + nxr]
            be, s2 = pars[1 + nxr : 1 + nxr + ner], pars[-1]
            zr = zc[:, rm.z_index]
            obs = ~np.isnan(zr)
            mz = intercept + xc[:, list(rm.x_vars)] @ bx
            mz = mz[:, None] + np.einsum("nqe,e->nq", eta[:, :, list(rm.eta_vars)], be)
            dev = np.where(obs[:, None], np.nan_to_num(zr)[:, None] - mz, 0.0)
            resp_dev.append((dev, obs, s2, be))
            for e_i, lat in enumerate(rm.eta_vars):
                gzeta[:, :, lat] += dev * be[e_i] / s2

        dim2 = theta2.size
        jac = np.empty((flat.size, dim2))
        for j in range(dim2):
            tc = theta2.astype(complex)
            tc[j] += 1j * _CSTEP
            jac[:, j] = _structural_flat(tc, spec, n_x, k).imag / _CSTEP

        for j in range(dim2):
            da = jac[s_a, j]
            db = jac[s_b, j].reshape(k, n_x)
            dl = jac[s_l, j].reshape(k, k)
            dmean = da[None, :] + xc @ db.T  # (nc, k)
            dshift = nodes_u @ dl.T  # (Q, k)
            deta = dmean[:, None, :] + dshift[None, :, :]
            col = np.sum(pw * np.einsum("nqk,nqk->nq", gzeta, deta), axis=1)
            # direct response-parameter terms at fixed eta
            for r_i, rm in enumerate(spec.response_models):
                dresp = jac[s_resp[r_i], j]
                if not np.any(dresp):
                    continue
                dev, obs, s2, _ = resp_dev[r_i]
                nxr, ner = len(rm.x_vars), len(rm.eta_vars)
                dint = dresp[0]
                dbx = dresp[1 : 1 + nxr]
                dbe = dresp[1 + nxr : 1 + nxr + ner]
                ds2 = dresp[-1]
                dmz = dint + xc[:, list(rm.x_vars)] @ dbx  # (nc,)
                term = dev / s2 * dmz[:, None]
                if ner:
                    term = term + dev / s2 * np.einsum(
                        "nqe,e->nq", eta[:, :, list(rm.eta_vars)], dbe
                    )
                if ds2:
                    term = term + obs[:, None] * ds2 * (dev**2 / s2 - 1.0) / (2.0 * s2)
                col += np.sum(pw * term, axis=1)
            cols.append(col)

    score_rows = np.column_stack(cols)
    grad = counts @ score_rows
    if unit_scores:
        if collapsible:
            full = _expand_rows(data.y, keep, score_rows)
        else:
            full = score_rows
        return value, grad, full
    return value, grad
