"""Gaussian-expectation quadrature.

Rules are normalized so that ``sum(w_i * f(x_i))`` approximates ``E[f(Z)]``
for ``Z ~ N(0, 1)``.  Affine transforms extend this to arbitrary normal
means/variances, and a product rule with a Cholesky transform handles
low-dimensional multivariate normals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "QuadratureRule",
    "gauss_hermite",
    "integrate_normal",
    "integrate_normal_kd",
]

MIN_POINTS = 2
MAX_POINTS = 200


class NumericalError(RuntimeError):
    """Raised when an integrand produces non-finite values."""


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights on the standard-normal scale.

    Immutable; safe to share across workers.
    """

    nodes: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        if nodes.ndim != 1 or weights.ndim != 1 or nodes.size != weights.size:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")
        if nodes.size < MIN_POINTS:
            raise ValueError(f"need at least {MIN_POINTS} quadrature points")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.max(np.abs(nodes + nodes[::-1])) > 1e-12:
            raise ValueError("nodes must be symmetric about 0")

    @property
    def n_points(self) -> int:
        return int(self.nodes.size)


def gauss_hermite(n_points: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule with ``n_points`` nodes.

    Exact for polynomials of degree <= 2 * n_points - 1 under the N(0, 1)
    weight.  Computed by eigen-decomposition of the Jacobi matrix of the
    Hermite recurrence (Golub-Welsch).
    """
    if not MIN_POINTS <= n_points <= MAX_POINTS:
        raise ValueError(
            f"n_points must be in [{MIN_POINTS}, {MAX_POINTS}], got {n_points}"
        )
    # Jacobi matrix for He_n: zero diagonal, off-diagonal sqrt(k).
    off = np.sqrt(np.arange(1, n_points, dtype=np.float64))
    jacobi = np.diag(off, 1) + np.diag(off, -1)
    nodes, vecs = np.linalg.eigh(jacobi)
    weights = vecs[0, :] ** 2
    weights /= weights.sum()
    # eigh can leave tiny asymmetries; enforce the exact node symmetry.
    nodes = (nodes - nodes[::-1]) / 2.0
    weights = (weights + weights[::-1]) / 2.0
    # for very large rules the extreme weights underflow to exactly zero;
    # drop those nodes (symmetrically, so the symmetry invariants hold)
    keep = weights > 0.0
    keep &= keep[::-1]
    nodes, weights = nodes[keep], weights[keep]
    weights /= weights.sum()
    return QuadratureRule(nodes=nodes, weights=weights)


def integrate_normal(f, rule: QuadratureRule, mean: float = 0.0, sd: float = 1.0) -> float:
    """E[f(V)] for V ~ N(mean, sd^2) by affine transform of the rule."""
    if sd <= 0:
        raise ValueError(f"sd must be positive, got {sd}")
    values = np.asarray(f(mean + sd * rule.nodes), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericalError("integrand returned non-finite values")
    return float(rule.weights @ values)


def product_nodes(rule: QuadratureRule, k: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Standard-normal product-rule nodes (Q, k) and weights (Q,) for k dims."""
    if k == 1:
        return rule.nodes[:, None], rule.weights.copy()
    grids = np.meshgrid(*([rule.nodes] * k), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*([rule.weights] * k), indexing="ij")
    weights = np.ones(nodes.shape[0])
    for w in wgrids:
        weights *= w.ravel()
    return nodes, weights


def cholesky_spd(cov: NDArray[np.float64]) -> NDArray[np.float64]:
    """Lower Cholesky factor, rejecting non-SPD input with a clear error."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("cov must be a square matrix")
    if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.max(np.abs(cov))):
        raise ValueError("cov must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("cov is not positive definite") from exc


def integrate_normal_kd(f, rule: QuadratureRule, mean, cov) -> float:
    """E[f(V)] for V ~ N(mean, cov), cov SPD, by a Cholesky product rule.

    ``f`` maps an (Q, k) array of points to (Q,) values.  Dimension k <= 3.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    k = mean.size
    if k > 3:
        raise ValueError(f"dimension {k} not supported (max 3)")
    chol = cholesky_spd(np.asarray(cov, dtype=np.float64))
    if chol.shape[0] != k:
        raise ValueError("mean and cov dimensions disagree")
    nodes, weights = product_nodes(rule, k)
    points = mean[None, :] + nodes @ chol.T
    values = np.asarray(f(points), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericalError("integrand returned non-finite values")
    return float(weights @ values)
