"""Command-line front end.

Subcommands: ``step1``, ``step2``, ``onestep``, ``threestep`` and
``simulate``.  Runs are described by a strict INI-style config file;
unknown keys are rejected with line numbers.  Step-1 results are written
to a self-describing JSON artifact that later ``step2``/``threestep``
runs (possibly on other data, or per group of a grouping column) can
reuse.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from .estimate import OptOptions, Step1Result, fit_onestep, fit_step1, fit_step2
from .likelihood import Step1Spec, step1_loglik_grad, step1_pack
from .model import (
    Dataset,
    JointModel,
    LatentBlock,
    MeasurementBlock,
    ResponseModel,
    StructuralSpec,
    pack,
    pack_labels,
    read_table,
    validate,
)
from .quadrature import NumericalError, gauss_hermite
from .simgen import CellDesign
from .simharness import HarnessOptions, emit_table, run_grid
from .threestep import naive_threestep
from .variance import info_blocks, onestep_se, sigma11, twostep_variance

__all__ = ["main"]

ARTIFACT_SCHEMA = "latira-step1-v1"
_SIGMA11_MODES = {"blockdiag": "block_diagonal", "score": "score_crossblock"}


class ConfigError(ValueError):
    """Config parsing or validation failure with line context."""


# ---------------------------------------------------------------------------
# Config parsing


def _parse_ini(text: str) -> dict[str, dict[str, tuple[str, int]]]:
    """Sections of key = value pairs; values carry their line numbers."""
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: str | None = None
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current in sections:
                errors.append(f"line {lineno}: duplicate section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        if current is None:
            errors.append(f"line {lineno}: key outside any [section]")
            continue
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if key in sections[current]:
            errors.append(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value.strip(), lineno)
    if errors:
        raise ConfigError("; ".join(errors))
    return sections


_KNOWN_KEYS = {
    "data": {"path", "items", "x", "z", "group", "missing", "delimiter"},
    "structural": None,  # free-form equation keys
    "options": {
        "quad_points", "starts", "seed", "sigma11", "max_iter",
        "rescale", "identification", "jitter_sd",
    },
    "output": {"artifact", "estimates", "table", "format", "scores"},
    "simulate": {"n_reps", "seed", "format", "estimators", "skew_shape"},
}
_BLOCK_KEYS = {"items", "anchor"}
_CELL_KEYS = {"case", "n", "p", "pi_y", "r2_y", "r2", "n_reps", "seed"}
_DELIMS = {"tab": "\t", "comma": ",", "semicolon": ";", "space": None}


@dataclass
class RunConfig:
    """Validated run description shared by all subcommands."""

    data_path: str | None = None
    item_cols: list[list[str]] = field(default_factory=list)
    anchors: list[int] = field(default_factory=list)
    x_cols: list[str] = field(default_factory=list)
    z_cols: list[str] = field(default_factory=list)
    group_col: str | None = None
    missing: str = "NA"
    delimiter: str | None = None
    equations: list[tuple[str, list[str]]] = field(default_factory=list)
    quad_points: int = 21
    n_starts: int = 10
    seed: int = 0
    max_iter: int = 500
    jitter_sd: float = 0.5
    sigma11_mode: str = "block_diagonal"
    rescale: bool = False
    identification: str = "anchor"
    artifact_path: str | None = None
    estimates_path: str | None = None
    table_path: str | None = None
    table_format: str = "csv"
    scores_path: str | None = None
    designs: list[CellDesign] = field(default_factory=list)
    sim_estimators: tuple[str, ...] = ("twostep", "onestep", "threestep")
    config_hash: str = ""


def _check_known(section: str, keys, errors: list[str]) -> None:
    base = section.split(" ", 1)[0]
    if base == "block":
        allowed = _BLOCK_KEYS
    elif base == "cell":
        allowed = _CELL_KEYS
    else:
        allowed = _KNOWN_KEYS.get(base)
        if allowed is None and base in _KNOWN_KEYS:
            return
        if allowed is None:
            errors.append(f"unknown section [{section}]")
            return
    for key, (_, lineno) in keys.items():
        if key not in allowed:
            errors.append(f"line {lineno}: unknown key {key!r} in [{section}]")


def parse_config(path: str) -> RunConfig:
    """Read and validate a config file; raises ConfigError on any problem."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    sections = _parse_ini(text)
    errors: list[str] = []
    for name, keys in sections.items():
        _check_known(name, keys, errors)
    cfg = RunConfig(config_hash=hashlib.sha256(text.encode()).hexdigest()[:16])

    def get(section, key, default=None):
        if section in sections and key in sections[section]:
            return sections[section][key][0]
        return default

    cfg.data_path = get("data", "path")
    cfg.missing = get("data", "missing", "NA")
    delim = get("data", "delimiter")
    if delim is not None:
        if delim not in _DELIMS:
            errors.append(f"delimiter must be one of {sorted(_DELIMS)}, got {delim!r}")
        else:
            cfg.delimiter = _DELIMS[delim]
    cfg.x_cols = (get("data", "x", "") or "").split()
    cfg.z_cols = (get("data", "z", "") or "").split()
    cfg.group_col = get("data", "group")

    block_names = sorted(
        (name for name in sections if name.startswith("block ")),
        key=lambda s: s.split(" ", 1)[1],
    )
    for name in block_names:
        keys = sections[name]
        if "items" not in keys:
            errors.append(f"[{name}] needs an 'items' key")
            continue
        items = keys["items"][0].split()
        anchor_name = keys.get("anchor", (items[0], 0))[0]
        if anchor_name not in items:
            errors.append(f"[{name}]: anchor {anchor_name!r} is not one of its items")
            continue
        cfg.item_cols.append(items)
        cfg.anchors.append(items.index(anchor_name))
    flat_items = get("data", "items")
    if flat_items and not cfg.item_cols:
        cfg.item_cols.append(flat_items.split())
        cfg.anchors.append(0)

    if "structural" in sections:
        for key, (value, lineno) in sections["structural"].items():
            preds = [] if value in ("", "1", "~") else value.split()
            cfg.equations.append((key, preds))

    cfg.quad_points = int(get("options", "quad_points", "21"))
    cfg.n_starts = int(get("options", "starts", "10"))
    cfg.seed = int(get("options", "seed", "0"))
    cfg.max_iter = int(get("options", "max_iter", "500"))
    cfg.jitter_sd = float(get("options", "jitter_sd", "0.5"))
    sig = get("options", "sigma11", "blockdiag")
    if sig not in _SIGMA11_MODES:
        errors.append(f"sigma11 must be one of {sorted(_SIGMA11_MODES)}, got {sig!r}")
    else:
        cfg.sigma11_mode = _SIGMA11_MODES[sig]
    cfg.rescale = get("options", "rescale", "false").lower() in ("true", "yes", "1")
    cfg.identification = get("options", "identification", "anchor")
    if cfg.identification not in ("anchor", "standardized"):
        errors.append(f"identification must be anchor or standardized")

    cfg.artifact_path = get("output", "artifact")
    cfg.estimates_path = get("output", "estimates")
    cfg.table_path = get("output", "table")
    cfg.table_format = get("output", "format", get("simulate", "format", "csv"))
    cfg.scores_path = get("output", "scores")

    sim_seed = int(get("simulate", "seed", "0"))
    sim_reps = int(get("simulate", "n_reps", "500"))
    est = get("simulate", "estimators")
    if est:
        cfg.sim_estimators = tuple(est.split())
    for name in sorted(n for n in sections if n.startswith("cell ")):
        keys = sections[name]
        try:
            cfg.designs.append(
                CellDesign(
                    case=keys["case"][0],
                    n=int(keys["n"][0]),
                    p=int(keys["p"][0]),
                    pi_y=float(keys["pi_y"][0]),
                    r2_y=float(keys["r2_y"][0]),
                    r2=float(keys["r2"][0]),
                    n_reps=int(keys.get("n_reps", (str(sim_reps), 0))[0]),
                    seed=int(keys.get("seed", (str(sim_seed), 0))[0]),
                )
            )
        except (KeyError, ValueError) as exc:
            errors.append(f"[{name}]: {exc}")

    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


# ---------------------------------------------------------------------------
# Model assembly from config


def build_model(cfg: RunConfig) -> JointModel:
    """Measurement blocks from the config's item lists plus a structural
    model from its equation section (independent latents by default)."""
    if not cfg.item_cols:
        raise ConfigError("no measurement blocks configured")
    blocks = tuple(
        MeasurementBlock(k, np.zeros(len(items)), np.ones(len(items)), anchor_item=cfg.anchors[k])
        for k, items in enumerate(cfg.item_cols)
    )
    n_latent = len(blocks)
    eta_names = {f"eta{k}": k for k in range(n_latent)}
    x_index = {name: i for i, name in enumerate(cfg.x_cols)}
    z_index = {name: i for i, name in enumerate(cfg.z_cols)}

    eq_by_lhs = dict(cfg.equations)
    latent_blocks = []
    for k in range(n_latent):
        preds = eq_by_lhs.get(f"eta{k}", [])
        x_vars, eta_vars = [], []
        for p in preds:
            if p in eta_names:
                eta_vars.append(eta_names[p])
            elif p in x_index:
                x_vars.append(x_index[p])
            else:
                raise ConfigError(f"equation for eta{k}: unknown predictor {p!r}")
        latent_blocks.append(
            LatentBlock(members=(k,), x_vars=tuple(x_vars), eta_vars=tuple(eta_vars))
        )
    responses = []
    for lhs, preds in cfg.equations:
        if lhs in eta_names:
            continue
        if lhs not in z_index:
            raise ConfigError(f"equation response {lhs!r} is neither a latent nor a z column")
        x_vars, eta_vars = [], []
        for p in preds:
            if p in eta_names:
                eta_vars.append(eta_names[p])
            elif p in x_index:
                x_vars.append(x_index[p])
            else:
                raise ConfigError(f"equation for {lhs}: unknown predictor {p!r}")
        responses.append(
            ResponseModel(z_index=z_index[lhs], x_vars=tuple(x_vars), eta_vars=tuple(eta_vars))
        )
    model = JointModel(blocks=blocks, structure=StructuralSpec(tuple(latent_blocks), tuple(responses)))
    problems = validate(model)
    if problems:
        raise ConfigError(f"model validation failed: {problems}")
    return model


def load_data(cfg: RunConfig):
    """Read the configured table; returns (dataset, group values or None)."""
    if cfg.data_path is None:
        raise ConfigError("[data] path is required for this command")
    header, values = read_table(cfg.data_path, cfg.delimiter, cfg.missing)
    index = {name: i for i, name in enumerate(header)}
    flat_items = [c for items in cfg.item_cols for c in items]
    missing = [c for c in flat_items + cfg.x_cols + cfg.z_cols if c not in index]
    if missing:
        raise ConfigError(f"columns not found in {cfg.data_path}: {missing}")
    y = values[:, [index[c] for c in flat_items]]
    x = values[:, [index[c] for c in cfg.x_cols]] if cfg.x_cols else None
    z = values[:, [index[c] for c in cfg.z_cols]] if cfg.z_cols else None
    groups = None
    if cfg.group_col is not None:
        if cfg.group_col not in index:
            raise ConfigError(f"group column {cfg.group_col!r} not found")
        groups = values[:, index[cfg.group_col]]
    return Dataset(y=y, x=x, z=z), groups


def _opt_options(cfg: RunConfig) -> OptOptions:
    return OptOptions(
        max_iter=cfg.max_iter,
        n_starts=cfg.n_starts,
        jitter_sd=cfg.jitter_sd,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# Step-1 artifacts


def write_step1_artifact(path: str, cfg: RunConfig, step1: Step1Result) -> None:
    blocks = []
    for i, spec in enumerate(step1.specs):
        blocks.append(
            {
                "latent_index": spec.block.latent_index,
                "items": cfg.item_cols[i],
                "anchor_item": spec.block.anchor_item,
                "tau": list(spec.block.tau),
                "lam": list(spec.block.lam),
                "mu": spec.mu,
                "sigma2": spec.sigma2,
                "identification": spec.identification,
                "info": np.asarray(step1.info[i]).tolist(),
                "loglik": step1.logliks[i],
                "converged": step1.fits[i].converged,
            }
        )
    doc = {
        "schema": ARTIFACT_SCHEMA,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash,
        "n1": step1.n1,
        "quad_points": step1.rule_points,
        "blocks": blocks,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_step1_artifact(path: str) -> Step1Result:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != ARTIFACT_SCHEMA:
        raise ConfigError(f"unsupported artifact schema {doc.get('schema')!r}")
    specs = []
    infos = []
    for b in doc["blocks"]:
        block = MeasurementBlock(
            latent_index=b["latent_index"],
            tau=np.array(b["tau"]),
            lam=np.array(b["lam"]),
            anchor_item=b["anchor_item"],
        )
        specs.append(Step1Spec(block, b["mu"], b["sigma2"], b["identification"]))
        infos.append(np.array(b["info"]))
    from .estimate import FitResult

    fits = tuple(
        FitResult(
            theta=step1_pack(spec),
            loglik=b["loglik"],
            converged=b["converged"],
            n_iter=0,
            start_index=0,
            gradient_norm=0.0,
        )
        for spec, b in zip(specs, doc["blocks"])
    )
    return Step1Result(
        specs=tuple(specs),
        logliks=tuple(b["loglik"] for b in doc["blocks"]),
        fits=fits,
        info=tuple(infos),
        n1=int(doc["n1"]),
        rule_points=int(doc["quad_points"]),
    )


def _with_unit_scores(step1: Step1Result, model: JointModel, data: Dataset, rule) -> Step1Result:
    """Recompute per-unit step-1 scores at the stored estimates (needed for
    the score-based cross-block covariance when the artifact lacks them)."""
    from dataclasses import replace as dc_replace

    slices = model.item_slices()
    scores = tuple(
        step1_loglik_grad(spec, data.y[:, slices[i]], rule, unit_scores=True)[2]
        for i, spec in enumerate(step1.specs)
    )
    return dc_replace(step1, unit_scores=scores)


# ---------------------------------------------------------------------------
# Result reporting


def _write_estimates(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=1)
    if path is None:
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _estimates_payload(model: JointModel, which: str, ses=None, extra=None) -> dict:
    labels = pack_labels(model, which)
    values = pack(model, which)
    out = {
        "estimates": {lab: float(v) for lab, v in zip(labels, values)},
    }
    if ses is not None:
        out["se"] = {lab: float(s) for lab, s in zip(labels, ses)}
    if extra:
        out.update(extra)
    return out


def _split_groups(data: Dataset, groups):
    values = np.unique(groups)
    for g in values:
        rows = groups == g
        yield g, Dataset(
            y=data.y[rows],
            x=None if data.x is None else data.x[rows],
            z=None if data.z is None else data.z[rows],
        )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_step1(cfg: RunConfig) -> int:
    model = build_model(cfg)
    data, _ = load_data(cfg)
    rule = gauss_hermite(cfg.quad_points)
    step1 = fit_step1(model, data, rule, _opt_options(cfg), identification=cfg.identification)
    if cfg.artifact_path:
        write_step1_artifact(cfg.artifact_path, cfg, step1)
    payload = {
        "command": "step1",
        "n": data.n,
        "loglik": sum(step1.logliks),
        "converged": step1.converged,
        "blocks": [
            {
                "latent_index": spec.block.latent_index,
                "tau": list(spec.block.tau),
                "lam": list(spec.block.lam),
                "mu": spec.mu,
                "sigma2": spec.sigma2,
            }
            for spec in step1.specs
        ],
    }
    _write_estimates(cfg.estimates_path, payload)
    return 0 if step1.converged else 1


def _get_step1(cfg: RunConfig, model, data, rule, step1_path: str | None):
    need_scores = cfg.sigma11_mode == "score_crossblock"
    if step1_path:
        step1 = load_step1_artifact(step1_path)
        if len(step1.specs) != len(model.blocks):
            raise ConfigError("step-1 artifact block count does not match the model")
        if need_scores:
            step1 = _with_unit_scores(step1, model, data, rule)
        return step1
    return fit_step1(model, data, rule, _opt_options(cfg),
                     identification=cfg.identification, unit_scores=need_scores)


def cmd_step2(cfg: RunConfig, step1_path: str | None) -> int:
    model = build_model(cfg)
    data, groups = load_data(cfg)
    rule = gauss_hermite(cfg.quad_points)
    results = []
    ok = True
    group_iter = [(None, data)] if groups is None else list(_split_groups(data, groups))
    step1_shared = None
    for gvalue, gdata in group_iter:
        step1 = step1_shared
        if step1 is None:
            step1 = _get_step1(cfg, model, gdata, rule, step1_path)
            if step1_path:
                step1_shared = step1  # one artifact reused across groups
        if step1_path and cfg.sigma11_mode == "score_crossblock":
            step1 = _with_unit_scores(step1, model, gdata, rule)
        fitted, fit = fit_step2(model, gdata, step1, rule, _opt_options(cfg))
        blocks = info_blocks(fitted, gdata, rule)
        s11 = sigma11(step1, cfg.sigma11_mode)
        vd = twostep_variance(blocks, s11, gdata.n, step1.n1)
        extra = {
            "command": "step2",
            "group": None if gvalue is None else float(gvalue),
            "n": gdata.n,
            "n1": step1.n1,
            "loglik": fit.loglik,
            "converged": bool(fit.converged),
            "pct_var_step2": [float(v) for v in vd.pct_step2],
            "se_nostep1": {
                lab: float(s)
                for lab, s in zip(pack_labels(fitted, "structural"), vd.se_nostep1)
            },
        }
        results.append(_estimates_payload(fitted, "structural", ses=vd.se, extra=extra))
        ok = ok and fit.converged
    payload = results[0] if groups is None else {"command": "step2", "groups": results}
    _write_estimates(cfg.estimates_path, payload)
    return 0 if ok else 1


def cmd_onestep(cfg: RunConfig) -> int:
    model = build_model(cfg)
    data, _ = load_data(cfg)
    rule = gauss_hermite(cfg.quad_points)
    fitted, fit = fit_onestep(model, data, rule, _opt_options(cfg))
    ses = onestep_se(fitted, data, rule)
    extra = {
        "command": "onestep",
        "n": data.n,
        "loglik": fit.loglik,
        "converged": bool(fit.converged),
    }
    _write_estimates(cfg.estimates_path, _estimates_payload(fitted, "all", ses=ses, extra=extra))
    return 0 if fit.converged else 1


def cmd_threestep(cfg: RunConfig, step1_path: str | None) -> int:
    model = build_model(cfg)
    data, groups = load_data(cfg)
    rule = gauss_hermite(cfg.quad_points)
    results = []
    ok = True
    group_iter = [(None, data)] if groups is None else list(_split_groups(data, groups))
    step1_shared = load_step1_artifact(step1_path) if step1_path else None
    for gvalue, gdata in group_iter:
        step1 = step1_shared
        if step1 is None:
            step1 = fit_step1(model, gdata, rule, _opt_options(cfg))
        ok = ok and step1.converged
        result = naive_threestep(gdata, model, step1, rule, rescale=cfg.rescale)
        extra = {
            "command": "threestep",
            "group": None if gvalue is None else float(gvalue),
            "n": gdata.n,
            "se": result.se_by_label,
        }
        results.append(_estimates_payload(result.estimates, "structural", extra=extra))
        if cfg.scores_path and gvalue is None:
            result.scores.write_delimited(cfg.scores_path)
    payload = results[0] if groups is None else {"command": "threestep", "groups": results}
    _write_estimates(cfg.estimates_path, payload)
    return 0 if ok else 1


def cmd_simulate(cfg: RunConfig) -> int:
    if not cfg.designs:
        raise ConfigError("simulate needs at least one [cell ...] section")
    options = HarnessOptions(
        quad_points=cfg.quad_points,
        n_starts=cfg.n_starts,
        opt_seed=cfg.seed,
        sigma11_mode=cfg.sigma11_mode,
        estimators=cfg.sim_estimators,
        rescale_threestep=cfg.rescale,
    )
    summaries = run_grid(cfg.designs, options)
    path = cfg.table_path or "simulation_table." + ("md" if cfg.table_format == "markdown" else cfg.table_format)
    emit_table(summaries, path, cfg.table_format)
    hard_failures = [s for s in summaries if s.n_converged == 0]
    for s in summaries:
        d = s.design
        print(f"cell case={d.case} n={d.n} p={d.p}: converged {s.n_converged}, failed {s.n_failed}")
    print(f"table written to {path}")
    return 1 if hard_failures else 0


# ---------------------------------------------------------------------------
# Entry point


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.quad_points is not None:
        cfg.quad_points = args.quad_points
    if args.starts is not None:
        cfg.n_starts = args.starts
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.designs = [CellDesign(**{**d.__dict__, "seed": args.seed}) for d in cfg.designs]
    if args.sigma11 is not None:
        cfg.sigma11_mode = _SIGMA11_MODES[args.sigma11]
    if getattr(args, "out", None):
        cfg.table_path = args.out
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="latira",
        description="Latent trait structural models: stepwise and joint estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration file")
    common.add_argument("--quad-points", type=int, default=None, dest="quad_points")
    common.add_argument("--starts", type=int, default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--sigma11", choices=sorted(_SIGMA11_MODES), default=None)

    sub.add_parser("step1", parents=[common], help="fit per-block measurement models")
    for name in ("step2", "threestep"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--step1", default=None, help="step-1 artifact to reuse")
    sub.add_parser("onestep", parents=[common], help="joint maximum likelihood")
    p = sub.add_parser("simulate", parents=[common], help="run simulation cells")
    p.add_argument("--out", default=None, help="output table path")

    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(parse_config(args.config), args)
        if args.command == "step1":
            return cmd_step1(cfg)
        if args.command == "step2":
            return cmd_step2(cfg, args.step1)
        if args.command == "onestep":
            return cmd_onestep(cfg)
        if args.command == "threestep":
            return cmd_threestep(cfg, args.step1)
        return cmd_simulate(cfg)
    except (ConfigError, NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
