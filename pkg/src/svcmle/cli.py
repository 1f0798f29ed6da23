"""Command-line interface: ``svcmle {simulate,fit,predict,validate,neighbors}``.

Every subcommand accepts ``--config FILE``, an INI file whose sections and keys
are listed in :data:`CONFIG_SCHEMA`; flags given on the command line override
the file. Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
error. ``SVCMLE_THREADS`` sets the default worker count and
``SVCMLE_VERBOSITY`` (0-2) the log level.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys

import numpy as np

from .covariance import NO_TAPER, TaperSpec
from .likelihood import PcPriorSpec
from .model import (
    ColumnRoles,
    CovParams,
    FitResult,
    format_float,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .optimizer import OptimizerConfig, default_init, fit, write_trace_csv
from .prediction import PredictionRequest, predict, write_predictions_csv
from .simulation import (
    PRESETS,
    PerturbedGridSpec,
    moving_window_validate,
    neighbor_count_profile,
    partition,
    perturbed_grid,
    sample_svc_dataset,
    truth_for,
)

log = logging.getLogger("svcmle")


class ConfigError(Exception):
    """Invalid flags or configuration file (exit code 2)."""


def _csv_list(text):
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


#: Accepted configuration keys per INI section, with their parsers.
CONFIG_SCHEMA = {
    "data": {"data": str, "response": str, "covariates": _csv_list, "coords": _csv_list,
             "time": str, "fold_file": str, "fold": str},
    "model": {"nu": float, "taper_range": float, "taper_family": str, "reg": str},
    "optimizer": {"max_iter": int, "gtol": float, "ftol": float, "fd_scheme": str,
                  "fd_step": float, "history": int, "multistart": int, "seed": int,
                  "space": str, "mode": str, "threads": int},
    "simulate": {"q": int, "p": int, "preset": str, "delta": float, "seed": int},
    "predict": {"fit": str, "new": str, "latent": lambda s: s.lower() in ("1", "true", "yes")},
    "validate": {"window": int, "horizon": int},
    "neighbors": {"taper_range": float},
    "output": {"out": str, "trace": str},
}


def read_config(path) -> dict:
    """Flat ``{key: value}`` from an INI file; unknown sections or keys are errors."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out = {}
    for section in cp.sections():
        schema = CONFIG_SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                out[key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    return out


def parse_reg(text) -> PcPriorSpec:
    """``off``, ``paper`` or ``pc:rho0=..,alpha=..,sigma0=..,alpha=..``.

    An ``alpha`` key applies to the most recent of ``rho0``/``sigma0``;
    ``alpha_rho``/``alpha_sigma`` may be given explicitly instead.
    """
    text = (text or "off").strip()
    if text == "off":
        return PcPriorSpec.off()
    if text == "paper":
        text = "pc:rho0=0.075,alpha=0.05,sigma0=0.25,alpha=0.05"
    if not text.startswith("pc:"):
        raise ConfigError(f"unknown regularization {text!r}")
    vals, last = {}, None
    for item in text[3:].split(","):
        if "=" not in item:
            raise ConfigError(f"malformed regularization entry {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        try:
            v = float(v)
        except ValueError as exc:
            raise ConfigError(f"non-numeric value in {item!r}") from exc
        if k in ("rho0", "sigma0"):
            last = k
            vals[k] = v
        elif k == "alpha":
            if last is None:
                raise ConfigError("'alpha' must follow rho0 or sigma0")
            vals["alpha_rho" if last == "rho0" else "alpha_sigma"] = v
        elif k in ("alpha_rho", "alpha_sigma"):
            vals[k] = v
        else:
            raise ConfigError(f"unknown regularization key {k!r}")
    missing = {"rho0", "alpha_rho", "sigma0", "alpha_sigma"} - vals.keys()
    if missing:
        raise ConfigError(f"regularization is missing {sorted(missing)}")
    try:
        return PcPriorSpec.from_tail_probs(vals["rho0"], vals["alpha_rho"],
                                           vals["sigma0"], vals["alpha_sigma"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_data_args(p, *, folds=True):
    p.add_argument("--data", help="input CSV with a header row")
    p.add_argument("--response", help="response column (default: y)")
    p.add_argument("--covariates", type=_csv_list,
                   help="comma-separated covariate columns (default: all x<k> columns)")
    p.add_argument("--coords", type=_csv_list,
                   help="comma-separated coordinate columns (default: s1,s2)")
    if folds:
        p.add_argument("--fold-file", dest="fold_file",
                       help="partition CSV (index,fold) selecting training rows")
        p.add_argument("--fold", help="fold name to train on (default: train)")


def _add_model_args(p):
    p.add_argument("--nu", type=float, help="Matérn smoothness of every SVC (default: 0.5)")
    p.add_argument("--taper-range", dest="taper_range", type=float,
                   help="covariance taper range; omit for no tapering")
    p.add_argument("--taper-family", dest="taper_family",
                   choices=["wendland1", "spherical"], help="taper family (default: wendland1)")
    p.add_argument("--reg", help="regularization: off | paper | "
                                 "pc:rho0=R,alpha=A,sigma0=S,alpha=B (default: off)")


def _add_optimizer_args(p):
    p.add_argument("--max-iter", dest="max_iter", type=int, help="iteration budget (default: 500)")
    p.add_argument("--gtol", type=float, help="gradient inf-norm tolerance (default: 1e-5)")
    p.add_argument("--ftol", type=float, help="relative objective tolerance (default: 1e-9)")
    p.add_argument("--fd-scheme", dest="fd_scheme", choices=["central", "forward"],
                   help="finite-difference scheme (default: central)")
    p.add_argument("--fd-step", dest="fd_step", type=float,
                   help="finite-difference step (default: 1e-6)")
    p.add_argument("--history", type=int, help="curvature pairs kept (default: 10)")
    p.add_argument("--multistart", type=int, help="number of starting points (default: 1)")
    p.add_argument("--seed", type=int, help="seed for multi-start jitter (default: 0)")
    p.add_argument("--space", choices=["log", "box"], help="parameter space (default: log)")
    p.add_argument("--mode", choices=["profile", "joint"], help="objective (default: profile)")
    p.add_argument("--threads", type=int,
                   help="worker threads (default: $SVCMLE_THREADS or available cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svcmle",
        description="Spatially varying coefficient models fitted by maximum likelihood.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a perturbed-grid SVC dataset")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--q", type=int, help="grid parameter; (2q)^2 locations")
    p.add_argument("--p", type=int, help="number of SVCs (default: preset's or 3)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="true model of a simulation design")
    p.add_argument("--delta", type=float, help="cell margin in [0, 0.5) (default: 0.2)")
    p.add_argument("--seed", type=int, help="random seed (default: 0)")
    p.add_argument("--out", help="output directory (default: .)")

    p = sub.add_parser("fit", help="estimate an SVC model")
    p.add_argument("--config", help="INI configuration file")
    _add_data_args(p)
    _add_model_args(p)
    _add_optimizer_args(p)
    p.add_argument("--out", help="FitResult JSON path (default: fit.json)")
    p.add_argument("--trace", help="optional iteration trace CSV path")

    p = sub.add_parser("predict", help="predict coefficients and responses at new locations")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--fit", help="FitResult JSON written by 'fit'")
    _add_data_args(p)
    p.add_argument("--new", help="CSV of new locations (and covariates for y_hat)")
    p.add_argument("--latent", action="store_true", default=None,
                   help="exclude the nugget from predictive variances")
    p.add_argument("--allow-unconverged", dest="allow_unconverged", action="store_true",
                   help="predict even if the fit did not converge")
    p.add_argument("--out", help="prediction CSV path (default: predictions.csv)")

    p = sub.add_parser("validate", help="moving-window validation over time periods")
    p.add_argument("--config", help="INI configuration file")
    _add_data_args(p, folds=False)
    p.add_argument("--time", help="time/period column (default: period)")
    p.add_argument("--window", type=int, help="training window in periods (default: 6)")
    p.add_argument("--horizon", type=int, help="predicted periods per fold (default: 1)")
    _add_model_args(p)
    _add_optimizer_args(p)
    p.add_argument("--out", help="output directory (default: .)")

    p = sub.add_parser("neighbors", help="neighbor counts within a taper range")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--data", help="CSV with coordinate columns")
    p.add_argument("--coords", type=_csv_list, help="coordinate columns (default: s1,s2)")
    p.add_argument("--taper-range", dest="taper_range", type=float, help="neighbor radius")
    p.add_argument("--out", help="per-point count CSV (optional)")
    return parser


def _merged(args) -> dict:
    opts = read_config(args.config) if getattr(args, "config", None) else {}
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            opts[k] = v
    return opts


def _roles(o, time=None) -> ColumnRoles:
    return ColumnRoles(o.get("response", "y"), tuple(o.get("covariates", ())),
                       tuple(o.get("coords", ("s1", "s2"))), time)


def _load(o, *, time=None, require_response=True):
    path = o.get("data")
    if not path:
        raise ConfigError("--data is required")
    if not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}")
    try:
        return read_dataset_csv(path, _roles(o, time), require_response=require_response)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc


def _fold_rows(o):
    path = o.get("fold_file")
    if not path:
        return None
    if not os.path.exists(path):
        raise ConfigError(f"fold file not found: {path}")
    fold = o.get("fold", "train")
    with open(path, newline="") as fh:
        rows = [int(r["index"]) for r in csv.DictReader(fh) if r["fold"] == fold]
    if not rows:
        raise ConfigError(f"fold {fold!r} is empty in {path}")
    return np.array(sorted(rows))


def _taper(o) -> TaperSpec:
    if o.get("taper_range") is None:
        return NO_TAPER
    try:
        return TaperSpec(float(o["taper_range"]), o.get("taper_family", "wendland1"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _opt_config(o) -> OptimizerConfig:
    kw = {"max_iterations": o.get("max_iter"), "gtol": o.get("gtol"), "ftol": o.get("ftol"),
          "fd_scheme": o.get("fd_scheme"), "fd_step": o.get("fd_step"),
          "history": o.get("history"), "multistart": o.get("multistart"),
          "seed": o.get("seed"), "space": o.get("space"), "mode": o.get("mode"),
          "threads": o.get("threads")}
    try:
        return OptimizerConfig(**{k: v for k, v in kw.items() if v is not None})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _init_for(d, o):
    init = default_init(d)
    return CovParams(init.rho, init.sigma2, init.nugget, o.get("nu", 0.5))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(o) -> int:
    preset = o.get("preset")
    setting = PRESETS[preset] if preset else None
    if preset and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    q = o.get("q", setting.grid.q if setting else None)
    if q is None:
        raise ConfigError("--q is required without --preset")
    truth = setting.truth if setting else truth_for(o.get("p", 3))
    if "p" in o and o["p"] != truth.p:
        if setting:
            raise ConfigError(f"preset {preset} has p={truth.p}, got --p {o['p']}")
    try:
        grid = PerturbedGridSpec(q, o.get("delta", 0.2))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seed = o.get("seed", 0)
    loc_ss, part_ss, data_ss = np.random.SeedSequence(seed).spawn(3)
    locs = perturbed_grid(grid, loc_ss)
    data, betas = sample_svc_dataset(locs, truth, data_ss)
    out = o.get("out", ".")
    os.makedirs(out, exist_ok=True)
    write_dataset_csv(os.path.join(out, "dataset.csv"), data)
    with open(os.path.join(out, "true_beta.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"beta_{j + 1}" for j in range(truth.p)])
        for row in betas:
            w.writerow([format_float(v) for v in row])
    try:
        folds = partition(locs, part_ss)
    except ValueError as exc:
        folds = None
        log.warning("no partition written: %s", exc)
    if folds is not None:
        labels = folds.labels(data.n)
        with open(os.path.join(out, "partition.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "fold"])
            for i, lab in enumerate(labels):
                w.writerow([i, lab])
    print(json.dumps({"n": data.n, "p": truth.p, "q": q, "seed": seed, "preset": preset,
                      "out": out}))
    return 0


def cmd_fit(o) -> int:
    d = _load(o)
    rows = _fold_rows(o)
    train = d if rows is None else d.subset(rows)
    bad = [f for f in validate_dataset(train) if f.severity == "error"]
    if bad:
        raise ConfigError("; ".join(f.message for f in bad))
    taper = _taper(o)
    reg = parse_reg(o.get("reg"))
    cfg = _opt_config(o)
    res = fit(train, _init_for(train, o), taper, reg, cfg)
    res.metadata = {
        "data": o.get("data"),
        "roles": {"response": o.get("response", "y"),
                  "covariates": list(o.get("covariates", ())),
                  "coords": list(o.get("coords", ("s1", "s2")))},
        "fold_file": o.get("fold_file"),
        "fold": o.get("fold", "train") if o.get("fold_file") else None,
        "n_train": train.n,
        "taper_range": None if not taper.active else taper.taper_range,
        "taper_family": taper.family,
        "reg": reg.to_dict(),
        "optimizer": {k: v for k, v in vars(cfg).items() if k != "threads"},
    }
    out = o.get("out", "fit.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    res.to_json(out)
    if o.get("trace"):
        write_trace_csv(o["trace"], res.trace)
    print(json.dumps({"converged": res.converged, "objective": res.objective,
                      "iterations": res.iterations, "out": out}))
    return 0


def cmd_predict(o) -> int:
    if not o.get("fit"):
        raise ConfigError("--fit is required")
    if not os.path.exists(o["fit"]):
        raise ConfigError(f"fit file not found: {o['fit']}")
    res = FitResult.from_json(o["fit"])
    meta = res.metadata
    for key in ("data", "fold_file", "fold"):
        if o.get(key) is None and meta.get(key) is not None:
            o[key] = meta[key]
    roles = meta.get("roles", {})
    for key in ("response", "covariates", "coords"):
        if o.get(key) is None and roles.get(key):
            o[key] = tuple(roles[key]) if key != "response" else roles[key]
    d = _load(o)
    rows = _fold_rows(o)
    train = d if rows is None else d.subset(rows)
    if train.p != res.theta_hat.p:
        raise ConfigError(f"fit has {res.theta_hat.p} SVCs but the data has {train.p} covariates")
    if not o.get("new"):
        raise ConfigError("--new is required")
    if not os.path.exists(o["new"]):
        raise ConfigError(f"new-locations file not found: {o['new']}")
    with open(o["new"], newline="") as fh:
        header = csv.DictReader(fh).fieldnames or []
    covs = tuple(o.get("covariates", ())) or tuple(
        c for c in header if c.startswith("x") and c[1:].isdigit())
    has_x = bool(covs) and all(c in header for c in covs)
    if has_x:
        new = read_dataset_csv(o["new"], ColumnRoles("y", covs, tuple(o.get("coords", ("s1", "s2")))),
                               require_response=False)
        if new.p != train.p:
            raise ConfigError("new covariates do not match the fitted model")
        req = PredictionRequest(new.locations, new.X)
    else:
        coords = tuple(o.get("coords", ("s1", "s2")))
        with open(o["new"], newline="") as fh:
            locs = np.array([[float(r[c]) for c in coords] for r in csv.DictReader(fh)])
        req = PredictionRequest(locs)
    pred = predict(res, train, req, res.taper, latent=bool(o.get("latent")),
                   allow_unconverged=bool(o.get("allow_unconverged")))
    out = o.get("out", "predictions.csv")
    write_predictions_csv(out, pred)
    print(json.dumps({"rows": int(pred.beta_hat.shape[0]), "out": out}))
    return 0


def cmd_validate(o) -> int:
    d = _load(o, time=o.get("time", "period"))
    res = moving_window_validate(d, o.get("window", 6), o.get("horizon", 1),
                                 taper=_taper(o), reg=parse_reg(o.get("reg")),
                                 cfg=_opt_config(o), nu=o.get("nu", 0.5))
    out = o.get("out", ".")
    res.write_csv(out)
    print(json.dumps([{"fold": f["fold"], "rmse": f["rmse"], "mean_crps": f["mean_crps"]}
                      for f in res.folds]))
    return 0


def cmd_neighbors(o) -> int:
    if o.get("taper_range") is None:
        raise ConfigError("--taper-range is required")
    path = o.get("data")
    if not path or not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}")
    coords = tuple(o.get("coords", ("s1", "s2")))
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        locs = np.array([[float(r[c]) for c in coords] for r in rows])
    except KeyError as exc:
        raise ConfigError(f"missing coordinate column {exc}") from exc
    counts, summary = neighbor_count_profile(locs, o["taper_range"])
    if o.get("out"):
        with open(o["out"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "neighbors"])
            for i, c in enumerate(counts):
                w.writerow([i, int(c)])
    print(json.dumps(summary))
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "validate": cmd_validate, "neighbors": cmd_neighbors}


def main(argv=None) -> int:
    level = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}.get(
        int(os.environ.get("SVCMLE_VERBOSITY", "0") or 0), logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        opts = _merged(args)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"svcmle {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"svcmle {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
