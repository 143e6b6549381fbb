"""Model and data containers.

A joint model couples per-latent measurement blocks (binary 2-PL items,
anchor-identified) with a recursive Gaussian structural model for the
latent variables and any observed Gaussian responses.  All containers are
immutable; ``pack``/``unpack`` translate between structured parameters and
a flat unconstrained vector for optimization.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "MeasurementBlock",
    "LatentBlock",
    "ResponseModel",
    "StructuralSpec",
    "JointModel",
    "Dataset",
    "pack",
    "unpack",
    "validate",
    "read_table",
    "dataset_from_table",
]


def _frozen(a, dtype=np.float64) -> NDArray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MeasurementBlock:
    """2-PL item parameters for one latent variable's item set.

    ``tau`` and ``lam`` are intercepts and loadings; the anchor item has
    tau = 0, lam = 1 fixed to set the latent scale.  ``loading_groups``
    optionally assigns items to equality groups (items in the same group
    share one loading; the anchor's group is fixed at 1).
    """

    latent_index: int
    tau: NDArray[np.float64]
    lam: NDArray[np.float64]
    anchor_item: int = 0
    loading_groups: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tau", _frozen(self.tau))
        object.__setattr__(self, "lam", _frozen(self.lam))

    @property
    def n_items(self) -> int:
        return int(self.tau.size)

    def groups(self) -> tuple[int, ...]:
        if self.loading_groups is not None:
            return self.loading_groups
        return tuple(range(self.n_items))

    def with_anchor_imposed(self) -> "MeasurementBlock":
        tau = np.array(self.tau)
        lam = np.array(self.lam)
        tau[self.anchor_item] = 0.0
        groups = self.groups()
        anchor_group = groups[self.anchor_item]
        for j, g in enumerate(groups):
            if g == anchor_group:
                lam[j] = 1.0
        return replace(self, tau=tau, lam=lam)


@dataclass(frozen=True)
class LatentBlock:
    """One equation of the recursive chain: a Gaussian linear model for the
    latent variables ``members`` given covariates ``x_vars`` and the earlier
    latents ``eta_vars``."""

    members: tuple[int, ...]
    x_vars: tuple[int, ...] = ()
    eta_vars: tuple[int, ...] = ()
    beta0: NDArray[np.float64] = field(default_factory=lambda: np.zeros(1))
    beta_x: NDArray[np.float64] | None = None
    beta_eta: NDArray[np.float64] | None = None
    psi: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        d = len(self.members)
        beta0 = np.zeros(d) if self.beta0 is None else np.asarray(self.beta0, float)
        beta_x = (
            np.zeros((d, len(self.x_vars)))
            if self.beta_x is None
            else np.asarray(self.beta_x, float).reshape(d, len(self.x_vars))
        )
        beta_eta = (
            np.zeros((d, len(self.eta_vars)))
            if self.beta_eta is None
            else np.asarray(self.beta_eta, float).reshape(d, len(self.eta_vars))
        )
        psi = np.eye(d) if self.psi is None else np.asarray(self.psi, float)
        object.__setattr__(self, "beta0", _frozen(beta0))
        object.__setattr__(self, "beta_x", _frozen(beta_x))
        object.__setattr__(self, "beta_eta", _frozen(beta_eta))
        object.__setattr__(self, "psi", _frozen(psi))

    @property
    def dim(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ResponseModel:
    """Gaussian linear model for one observed response column given
    covariates and latents."""

    z_index: int
    x_vars: tuple[int, ...] = ()
    eta_vars: tuple[int, ...] = ()
    intercept: float = 0.0
    beta_x: NDArray[np.float64] | None = None
    beta_eta: NDArray[np.float64] | None = None
    resid_var: float = 1.0

    def __post_init__(self) -> None:
        bx = (
            np.zeros(len(self.x_vars))
            if self.beta_x is None
            else np.asarray(self.beta_x, float).reshape(len(self.x_vars))
        )
        be = (
            np.zeros(len(self.eta_vars))
            if self.beta_eta is None
            else np.asarray(self.beta_eta, float).reshape(len(self.eta_vars))
        )
        object.__setattr__(self, "beta_x", _frozen(bx))
        object.__setattr__(self, "beta_eta", _frozen(be))


@dataclass(frozen=True)
class StructuralSpec:
    """Ordered latent blocks plus response models."""

    latent_blocks: tuple[LatentBlock, ...]
    response_models: tuple[ResponseModel, ...] = ()

    @property
    def n_latent(self) -> int:
        return sum(b.dim for b in self.latent_blocks)


@dataclass(frozen=True)
class JointModel:
    blocks: tuple[MeasurementBlock, ...]
    structure: StructuralSpec

    @property
    def n_latent(self) -> int:
        return len(self.blocks)

    def item_slices(self) -> tuple[slice, ...]:
        """Column ranges of each block's items in the stacked item matrix."""
        out = []
        start = 0
        for b in self.blocks:
            out.append(slice(start, start + b.n_items))
            start += b.n_items
        return tuple(out)

    @property
    def n_items(self) -> int:
        return sum(b.n_items for b in self.blocks)


@dataclass(frozen=True)
class Dataset:
    """Observed data: binary items ``y`` (NaN = missing), complete
    covariates ``x`` and responses ``z`` (NaN = missing, MAR)."""

    y: NDArray[np.float64]
    x: NDArray[np.float64] | None = None
    z: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        y = np.asarray(self.y, float)
        if y.ndim != 2:
            raise ValueError("y must be 2-d")
        observed = ~np.isnan(y)
        bad = y[observed]
        if bad.size and not np.all((bad == 0.0) | (bad == 1.0)):
            raise ValueError("observed items must be 0 or 1")
        if not observed.any(axis=1).all():
            raise ValueError("every row must have at least one observed item")
        x = None if self.x is None else np.asarray(self.x, float)
        if x is not None:
            x = x.reshape(y.shape[0], -1)
            if np.isnan(x).any():
                raise ValueError("x must be complete (no missing values)")
        z = None if self.z is None else np.asarray(self.z, float).reshape(y.shape[0], -1)
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", None if x is None else _frozen(x))
        object.__setattr__(self, "z", None if z is None else _frozen(z))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_x(self) -> int:
        return 0 if self.x is None else self.x.shape[1]

    @property
    def n_z(self) -> int:
        return 0 if self.z is None else self.z.shape[1]


# ---------------------------------------------------------------------------
# Flat parameter vector mapping


def _tril_indices_rowmajor(d: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(d) for j in range(i + 1)]


def _free_loading_groups(block: MeasurementBlock) -> list[int]:
    """Group ids with a free loading, in order of first appearance."""
    groups = block.groups()
    anchor_group = groups[block.anchor_item]
    seen: list[int] = []
    for g in groups:
        if g != anchor_group and g not in seen:
            seen.append(g)
    return seen


def measurement_dim(model: JointModel) -> int:
    return sum(
        (b.n_items - 1) + len(_free_loading_groups(b)) for b in model.blocks
    )


def structural_dim(model: JointModel) -> int:
    n = 0
    for lb in model.structure.latent_blocks:
        n += lb.dim + lb.beta_x.size + lb.beta_eta.size + lb.dim * (lb.dim + 1) // 2
    for rm in model.structure.response_models:
        n += 1 + rm.beta_x.size + rm.beta_eta.size + 1
    return n


def free_dim(model: JointModel, which: str = "all") -> int:
    if which == "measurement":
        return measurement_dim(model)
    if which == "structural":
        return structural_dim(model)
    if which == "all":
        return measurement_dim(model) + structural_dim(model)
    raise ValueError(f"unknown which={which!r}")


def _pack_block(block: MeasurementBlock) -> list[float]:
    out = [block.tau[j] for j in range(block.n_items) if j != block.anchor_item]
    groups = block.groups()
    for g in _free_loading_groups(block):
        out.append(block.lam[groups.index(g)])
    return out


def _unpack_block(block: MeasurementBlock, vec: NDArray, pos: int) -> tuple[MeasurementBlock, int]:
    tau = np.zeros(block.n_items)
    for j in range(block.n_items):
        if j != block.anchor_item:
            tau[j] = vec[pos]
            pos += 1
    groups = block.groups()
    anchor_group = groups[block.anchor_item]
    lam_by_group = {anchor_group: 1.0}
    for g in _free_loading_groups(block):
        lam_by_group[g] = vec[pos]
        pos += 1
    lam = np.array([lam_by_group[g] for g in groups])
    return replace(block, tau=tau, lam=lam), pos


def chol_to_params(psi: NDArray) -> list[float]:
    """Lower Cholesky of an SPD matrix as a flat list, log scale on the diagonal."""
    chol = np.linalg.cholesky(np.asarray(psi, float))
    out = []
    for i, j in _tril_indices_rowmajor(psi.shape[0]):
        out.append(np.log(chol[i, i]) if i == j else chol[i, j])
    return out


def params_to_chol(vec, d: int, pos: int = 0):
    """Inverse of :func:`chol_to_params`; dtype follows ``vec`` (supports
    complex-step differentiation)."""
    chol = np.zeros((d, d), dtype=np.asarray(vec).dtype)
    for i, j in _tril_indices_rowmajor(d):
        chol[i, j] = np.exp(vec[pos]) if i == j else vec[pos]
        pos += 1
    return chol, pos


def _pack_structural(spec: StructuralSpec) -> list[float]:
    out: list[float] = []
    for lb in spec.latent_blocks:
        out.extend(lb.beta0)
        out.extend(lb.beta_x.ravel())
        out.extend(lb.beta_eta.ravel())
        out.extend(chol_to_params(lb.psi))
    for rm in spec.response_models:
        out.append(rm.intercept)
        out.extend(rm.beta_x)
        out.extend(rm.beta_eta)
        out.append(0.5 * np.log(rm.resid_var))
    return out


def _unpack_structural(spec: StructuralSpec, vec: NDArray, pos: int) -> tuple[StructuralSpec, int]:
    blocks = []
    for lb in spec.latent_blocks:
        d = lb.dim
        beta0 = np.asarray(vec[pos : pos + d], float)
        pos += d
        nx = lb.beta_x.size
        beta_x = np.asarray(vec[pos : pos + nx], float).reshape(d, -1) if nx else None
        pos += nx
        ne = lb.beta_eta.size
        beta_eta = np.asarray(vec[pos : pos + ne], float).reshape(d, -1) if ne else None
        pos += ne
        chol, pos = params_to_chol(vec, d, pos)
        blocks.append(
            replace(lb, beta0=beta0, beta_x=beta_x, beta_eta=beta_eta, psi=chol @ chol.T)
        )
    responses = []
    for rm in spec.response_models:
        intercept = float(vec[pos])
        pos += 1
        nx = rm.beta_x.size
        beta_x = np.asarray(vec[pos : pos + nx], float) if nx else None
        pos += nx
        ne = rm.beta_eta.size
        beta_eta = np.asarray(vec[pos : pos + ne], float) if ne else None
        pos += ne
        resid_var = float(np.exp(2.0 * vec[pos]))
        pos += 1
        responses.append(
            replace(rm, intercept=intercept, beta_x=beta_x, beta_eta=beta_eta, resid_var=resid_var)
        )
    return StructuralSpec(tuple(blocks), tuple(responses)), pos


def pack(model: JointModel, which: str = "all") -> NDArray[np.float64]:
    """Flatten the model's free parameters.

    Anchor-fixed and equality-constrained entries are excluded; variances go
    on the log-sd scale and covariance blocks through a Cholesky factor with
    log diagonal, so the flat vector is unconstrained.
    """
    out: list[float] = []
    if which in ("measurement", "all"):
        for b in model.blocks:
            out.extend(_pack_block(b))
    if which in ("structural", "all"):
        out.extend(_pack_structural(model.structure))
    if which not in ("measurement", "structural", "all"):
        raise ValueError(f"unknown which={which!r}")
    return np.array(out, dtype=np.float64)


def unpack(vec, template: JointModel, which: str = "all") -> JointModel:
    """Inverse of :func:`pack`; anchors and constraints are reimposed exactly."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != free_dim(template, which):
        raise ValueError(
            f"expected vector of length {free_dim(template, which)}, got {vec.size}"
        )
    pos = 0
    blocks = template.blocks
    structure = template.structure
    if which in ("measurement", "all"):
        new_blocks = []
        for b in template.blocks:
            nb, pos = _unpack_block(b, vec, pos)
            new_blocks.append(nb)
        blocks = tuple(new_blocks)
    if which in ("structural", "all"):
        structure, pos = _unpack_structural(template.structure, vec, pos)
    return JointModel(blocks=blocks, structure=structure)


def pack_labels(model: JointModel, which: str = "all") -> list[str]:
    """Human-readable names for each entry of ``pack(model, which)``."""
    labels: list[str] = []
    if which in ("measurement", "all"):
        for b in model.blocks:
            k = b.latent_index
            for j in range(b.n_items):
                if j != b.anchor_item:
                    labels.append(f"tau[{k}][{j}]")
            groups = b.groups()
            for g in _free_loading_groups(b):
                labels.append(f"lam[{k}][{groups.index(g)}]")
    if which in ("structural", "all"):
        for m, lb in enumerate(model.structure.latent_blocks):
            for i, lat in enumerate(lb.members):
                labels.append(f"beta0[eta{lat}]")
            for i, lat in enumerate(lb.members):
                for xv in lb.x_vars:
                    labels.append(f"beta_x[eta{lat}][x{xv}]")
            for i, lat in enumerate(lb.members):
                for ev in lb.eta_vars:
                    labels.append(f"beta_eta[eta{lat}][eta{ev}]")
            for i, j in _tril_indices_rowmajor(lb.dim):
                tag = "logdiag" if i == j else "offdiag"
                labels.append(f"psi_chol[b{m}][{i},{j}]:{tag}")
        for rm in model.structure.response_models:
            labels.append(f"intercept[z{rm.z_index}]")
            for xv in rm.x_vars:
                labels.append(f"beta_x[z{rm.z_index}][x{xv}]")
            for ev in rm.eta_vars:
                labels.append(f"beta_eta[z{rm.z_index}][eta{ev}]")
            labels.append(f"log_sd[z{rm.z_index}]")
    if which not in ("measurement", "structural", "all"):
        raise ValueError(f"unknown which={which!r}")
    return labels


# ---------------------------------------------------------------------------
# Validation


def _is_spd(mat: NDArray) -> bool:
    mat = np.asarray(mat, float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        return False
    if np.max(np.abs(mat - mat.T)) > 1e-10 * max(1.0, np.max(np.abs(mat))):
        return False
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return False
    return True


def validate(model: JointModel) -> list[str]:
    """Invariant checks; returns a list of violation codes (empty = valid)."""
    violations: list[str] = []
    latent_seen: set[int] = set()
    for b in model.blocks:
        if b.n_items < 1:
            violations.append("empty_block")
        if b.tau.size != b.lam.size:
            violations.append("tau_lambda_length")
        if not 0 <= b.anchor_item < b.n_items:
            violations.append("anchor_out_of_range")
        elif b.tau[b.anchor_item] != 0.0 or b.lam[b.anchor_item] != 1.0:
            violations.append("anchor_not_imposed")
        if b.loading_groups is not None and len(b.loading_groups) != b.n_items:
            violations.append("loading_groups_length")
        if b.latent_index in latent_seen:
            violations.append("item_overlap")
        latent_seen.add(b.latent_index)
    k_total = len(model.blocks)
    structure = model.structure
    members_seen: list[int] = []
    for m, lb in enumerate(structure.latent_blocks):
        for idx in lb.members:
            if idx in members_seen:
                violations.append("latent_in_two_blocks")
            members_seen.append(idx)
        for idx in lb.eta_vars:
            if idx not in {i for prior in structure.latent_blocks[:m] for i in prior.members}:
                violations.append("chain_not_recursive")
        if not _is_spd(lb.psi):
            violations.append("psi_not_spd")
    if sorted(members_seen) != list(range(k_total)):
        violations.append("latent_partition_incomplete")
    for rm in structure.response_models:
        if rm.resid_var <= 0:
            violations.append("resid_var_not_positive")
        for idx in rm.eta_vars:
            if idx not in members_seen:
                violations.append("response_unknown_latent")
    return violations


# ---------------------------------------------------------------------------
# Delimited-text ingestion


def read_table(path, delimiter: str | None = None, missing: str = "NA"):
    """Read a delimited text file with a header row.

    Returns ``(header, values)`` where missing entries become NaN.  The
    delimiter is sniffed from the header line unless given.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline().rstrip("\n")
        if delimiter is None:
            for cand in ("\t", ",", ";"):
                if cand in header_line:
                    delimiter = cand
                    break
            else:
                delimiter = None  # whitespace
        header = header_line.split(delimiter)
        header = [h.strip() for h in header]
        rows = []
        for line in fh:
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = [f.strip() for f in line.split(delimiter)]
            if len(fields) != len(header):
                raise ValueError(f"row has {len(fields)} fields, expected {len(header)}")
            rows.append(
                [np.nan if f == missing or f == "" else float(f) for f in fields]
            )
    return header, np.array(rows, dtype=np.float64)


def dataset_from_table(
    header: list[str],
    values: NDArray[np.float64],
    item_cols: list[str],
    x_cols: list[str] | None = None,
    z_cols: list[str] | None = None,
) -> Dataset:
    """Assemble a :class:`Dataset` by column name from a parsed table."""
    index = {name: i for i, name in enumerate(header)}
    missing = [c for c in item_cols + (x_cols or []) + (z_cols or []) if c not in index]
    if missing:
        raise ValueError(f"columns not found: {missing}")
    y = values[:, [index[c] for c in item_cols]]
    x = values[:, [index[c] for c in x_cols]] if x_cols else None
    z = values[:, [index[c] for c in z_cols]] if z_cols else None
    return Dataset(y=y, x=x, z=z)
