"""Monte Carlo harness: run design cells, summarize the target coefficient.

Per replicate the harness generates a dataset, runs the two-step fit with
its corrected standard error, the one-step fit with information-based
standard errors, and the naive three-step fit with regression standard
errors, then accumulates bias, RMSE, MAE (median absolute error), the
spread and mean of estimated standard errors, and 95 percent interval
coverage against the design's target value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .estimate import OptOptions, fit_onestep, fit_step1, fit_step2
from .model import pack, pack_labels
from .quadrature import NumericalError, gauss_hermite
from .simgen import CellDesign, beta1_label, gen_dataset, model_for_design, true_params
from .threestep import naive_threestep
from .variance import info_blocks, onestep_se, sigma11, twostep_variance

__all__ = ["HarnessOptions", "CellSummary", "run_replicate", "run_cell", "run_grid", "emit_table"]

ESTIMATORS = ("twostep", "onestep", "threestep")
Z95 = 1.96
FAIL_LIMIT = 0.2  # a cell fails hard when more than this share of replicates error out


@dataclass(frozen=True)
class HarnessOptions:
    """Estimation settings shared by all replicates of a run."""

    quad_points: int = 21
    n_starts: int = 1
    opt_seed: int = 0
    sigma11_mode: str = "block_diagonal"
    estimators: tuple[str, ...] = ESTIMATORS
    rescale_threestep: bool = False
    log_path: str | None = None

    def __post_init__(self) -> None:
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")


@dataclass(frozen=True)
class CellSummary:
    """Metrics for one design cell; estimator keys are 'twostep',
    'onestep', 'threestep'."""

    design: CellDesign
    beta1_true: float
    bias: dict[str, float]
    rmse: dict[str, float]
    mae: dict[str, float]
    sd: dict[str, float]
    mean_se: dict[str, float]
    coverage95: dict[str, float]
    pct_var_step2: float
    coverage95_no_step1: float
    n_converged: int
    n_failed: int
    failures: tuple[str, ...] = field(default=())


def run_replicate(design: CellDesign, rep_index: int, options: HarnessOptions) -> dict:
    """Point estimates and standard errors of the target coefficient for one
    replicate.  Returns a flat record; raises on estimation failure."""
    data, _ = gen_dataset(design, rep_index)
    model = model_for_design(design)
    rule = gauss_hermite(options.quad_points)
    opts = OptOptions(n_starts=options.n_starts, seed=options.opt_seed + rep_index)
    label2 = beta1_label(design)
    idx2 = pack_labels(model, "structural").index(label2)
    idx_all = pack_labels(model, "all").index(label2)
    need_scores = options.sigma11_mode == "score_crossblock"
    record: dict = {"rep": rep_index}

    step1 = fit_step1(model, data, rule, opts, unit_scores=need_scores)
    record["step1_converged"] = step1.converged

    m2 = None
    if "twostep" in options.estimators:
        m2, f2 = fit_step2(model, data, step1, rule, opts)
        blocks = info_blocks(m2, data, rule)
        s11 = sigma11(step1, options.sigma11_mode)
        vd = twostep_variance(blocks, s11, data.n, step1.n1)
        record["twostep_est"] = float(pack(m2, "structural")[idx2])
        record["twostep_se"] = float(vd.se[idx2])
        record["twostep_se_nostep1"] = float(vd.se_nostep1[idx2])
        record["twostep_pctvar2"] = float(vd.pct_step2[idx2])
        record["twostep_converged"] = f2.converged
        record["twostep_loglik"] = f2.loglik

    if "onestep" in options.estimators:
        m1, f1 = fit_onestep(model, data, rule, opts, warm_start=m2)
        record["onestep_est"] = float(pack(m1, "all")[idx_all])
        record["onestep_se"] = float(onestep_se(m1, data, rule)[idx_all])
        record["onestep_converged"] = f1.converged
        record["onestep_loglik"] = f1.loglik

    if "threestep" in options.estimators:
        t3 = naive_threestep(data, model, step1, rule, rescale=options.rescale_threestep)
        record["threestep_est"] = float(pack(t3.estimates, "structural")[idx2])
        record["threestep_se"] = float(t3.se_by_label[label2])
        record["threestep_converged"] = True
    return record


def _summarize(design: CellDesign, records: list[dict], failures: list[str],
               options: HarnessOptions) -> CellSummary:
    target = true_params(design).beta1_anchor
    bias: dict[str, float] = {}
    rmse: dict[str, float] = {}
    mae: dict[str, float] = {}
    sd: dict[str, float] = {}
    mean_se: dict[str, float] = {}
    cover: dict[str, float] = {}
    nan = float("nan")
    for est in ESTIMATORS:
        if est not in options.estimators or not records:
            bias[est] = rmse[est] = mae[est] = sd[est] = mean_se[est] = cover[est] = nan
            continue
        e = np.array([r[f"{est}_est"] for r in records])
        s = np.array([r[f"{est}_se"] for r in records])
        err = e - target
        bias[est] = float(err.mean())
        rmse[est] = float(np.sqrt((err**2).mean()))
        mae[est] = float(np.median(np.abs(err)))
        sd[est] = float(e.std(ddof=1)) if e.size > 1 else nan
        mean_se[est] = float(s.mean())
        cover[est] = float(100.0 * np.mean(np.abs(err) <= Z95 * s))
    if "twostep" in options.estimators and records:
        pct = float(np.mean([r["twostep_pctvar2"] for r in records]))
        e = np.array([r["twostep_est"] for r in records])
        s0 = np.array([r["twostep_se_nostep1"] for r in records])
        cover0 = float(100.0 * np.mean(np.abs(e - target) <= Z95 * s0))
    else:
        pct = cover0 = nan
    return CellSummary(
        design=design,
        beta1_true=target,
        bias=bias,
        rmse=rmse,
        mae=mae,
        sd=sd,
        mean_se=mean_se,
        coverage95=cover,
        pct_var_step2=pct,
        coverage95_no_step1=cover0,
        n_converged=len(records),
        n_failed=len(failures),
        failures=tuple(failures),
    )


def run_cell(design: CellDesign, options: HarnessOptions | None = None) -> CellSummary:
    """Run every replicate of one cell and summarize.

    Replicates that raise numerical or linear-algebra errors are recorded
    as failures and excluded; the cell itself fails only when the failure
    share exceeds 20 percent.
    """
    options = options if options is not None else HarnessOptions()
    records: list[dict] = []
    failures: list[str] = []
    log = open(options.log_path, "a", encoding="utf-8") if options.log_path else None
    try:
        for rep in range(design.n_reps):
            try:
                record = run_replicate(design, rep, options)
            except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
                failures.append(f"rep {rep}: {exc}")
                continue
            records.append(record)
            if log is not None:
                log.write(json.dumps(record) + "\n")
    finally:
        if log is not None:
            log.close()
    if len(failures) > FAIL_LIMIT * design.n_reps:
        raise NumericalError(
            f"cell failed: {len(failures)} of {design.n_reps} replicates errored"
        )
    return _summarize(design, records, failures, options)


def run_grid(designs, options: HarnessOptions | None = None) -> list[CellSummary]:
    """Map :func:`run_cell` over designs; failed cells become marked rows."""
    options = options if options is not None else HarnessOptions()
    out = []
    for design in designs:
        try:
            out.append(run_cell(design, options))
        except NumericalError as exc:
            out.append(
                _summarize(design, [], [str(exc)], options)
            )
    return out


TABLE_COLUMNS = [
    "p", "pi_y", "r2_y", "r2", "beta1_true",
    "bias_2", "bias_1", "bias_3",
    "rmse_2", "rmse_1", "rmse_3",
    "mae_2", "mae_1", "mae_3",
    "sd_2", "sd_1",
    "mse_mean_2", "mse_mean_1",
    "cover_2", "cover_1", "cover_3",
    "pctvar2", "cover_nostep1", "n_converged",
]


def _row(summary: CellSummary) -> list:
    d = summary.design
    return [
        d.p, d.pi_y, d.r2_y, d.r2, summary.beta1_true,
        summary.bias["twostep"], summary.bias["onestep"], summary.bias["threestep"],
        summary.rmse["twostep"], summary.rmse["onestep"], summary.rmse["threestep"],
        summary.mae["twostep"], summary.mae["onestep"], summary.mae["threestep"],
        summary.sd["twostep"], summary.sd["onestep"],
        summary.mean_se["twostep"], summary.mean_se["onestep"],
        summary.coverage95["twostep"], summary.coverage95["onestep"],
        summary.coverage95["threestep"],
        summary.pct_var_step2, summary.coverage95_no_step1, summary.n_converged,
    ]


def emit_table(summaries, path, fmt: str = "csv") -> None:
    """Write one row per cell with the fixed column layout in
    ``TABLE_COLUMNS``."""
    if not summaries:
        raise ValueError("no summaries to emit")
    if fmt not in ("csv", "tsv", "markdown"):
        raise ValueError(f"unknown format {fmt!r}")
    rows = [[_format_value(v) for v in _row(s)] for s in summaries]
    with open(path, "w", encoding="utf-8") as fh:
        if fmt == "markdown":
            fh.write("| " + " | ".join(TABLE_COLUMNS) + " |\n")
            fh.write("|" + "---|" * len(TABLE_COLUMNS) + "\n")
            for row in rows:
                fh.write("| " + " | ".join(row) + " |\n")
        else:
            sep = "," if fmt == "csv" else "\t"
            fh.write(sep.join(TABLE_COLUMNS) + "\n")
            for row in rows:
                fh.write(sep.join(row) + "\n")


def _format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
