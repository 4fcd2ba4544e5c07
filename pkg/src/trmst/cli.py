"""Command-line interface: ``trmst {prep-stanford,fit,predict,simulate,evaluate}``.

Every command writes its reports into ``--out`` together with a
``manifest.json`` (command, configuration, seed, version, input
checksums, timestamps).  Reports never contain timestamps, so rerunning a
command with the same manifest reproduces them byte for byte.  All files
are written to a temporary name and renamed into place.
"""

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from fractions import Fraction

import numpy as np

from . import __version__
from .core import read_csv, write_csv
from .cox import cox_summary, fit_cox, nagelkerke_r2
from .errors import ConfigError, ModelKindMismatch, TrmstError
from .evaluate import repeated_evaluation
from .rmst import GRID_POLICIES, WEIGHTINGS, RmstFit, fit_rmst_model, get_link, predict_rmst
from .rmst import rmst_r2
from .sim import SimConfig, read_config, run_coefficient_study, run_prediction_study
from .sim import true_coefficients, write_rows
from .stanford import load_stanford

MODEL_FORMAT = "trmst-model"
MODEL_VERSION = 1
KINDS = {"t-cox": "T-Cox", "t-rmst": "T-RMST", "f-rmst": "F-RMST"}
FIT_COLUMNS = ("covariate", "estimate", "se", "ci_low", "ci_high", "p",
               "effect", "effect_low", "effect_high")
COEF_STUDY_COLUMNS = ("n", "censoring", "coefficient", "true", "bias", "mse", "rmse", "rel_se", "cp")
PRED_STUDY_COLUMNS = ("n", "censoring", "model", "c_index", "prediction_error")
EVAL_COLUMNS = ("model", "c_index", "prediction_error", "n_test", "n_usable_pairs",
                  "repeats", "skipped_repeats")


# -- file helpers ---------------------------------------------------------------------

def _atomic_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out, command, config, seed=None, inputs=(), outputs=()):
    started = config.pop("_started", None)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    _atomic_text(os.path.join(out, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _config_snapshot(args):
    skip = {"func", "handler"}
    snap = {k: v for k, v in vars(args).items() if k not in skip}
    snap["_started"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return snap


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _fraction(text):
    try:
        value = float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    return value


def _td_columns(text):
    return tuple(c.strip() for c in text.split(",") if c.strip()) if text else ()


# -- model files ----------------------------------------------------------------------

def model_to_json(kind, fit, r2, data_checksum=None, weighting=None):
    """Self-describing model file contents."""
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": kind,
           "data_sha256": data_checksum, "r2": r2}
    if kind == "t-cox":
        doc.update(names=list(fit.names), coefficients=fit.coefficients.tolist(),
                   covariance=fit.covariance.tolist(), ties=fit.ties)
    else:
        doc.update(names=list(fit.names), coefficients=fit.eta.tolist(),
                   covariance=fit.covariance.tolist(), tau=fit.tau, link=fit.link.kind,
                   grid_policy=fit.grid_policy, weighting=weighting, n=fit.n, df=fit.df,
                   p=fit.p, q=fit.q)
    return json.dumps(doc, indent=2) + "\n"


def load_model(path):
    """Read a model file; returns the parsed dictionary."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not a model file ({exc})") from None
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigError(f"{path}: not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise ConfigError(f"{path}: unsupported model file version {doc.get('version')}")
    return doc


def rmst_fit_from_model(doc):
    """Rebuild the parts of an :class:`RmstFit` needed for prediction."""
    if doc["kind"] not in ("t-rmst", "f-rmst"):
        raise ModelKindMismatch(f"cannot predict RMST from a {doc['kind']} model")
    cov = np.asarray(doc["covariance"], dtype=float)
    n = int(doc["n"])
    return RmstFit(eta=np.asarray(doc["coefficients"], dtype=float), covariance=cov,
                   ase=np.sqrt(np.clip(np.diag(cov), 0, None) / n), tau=float(doc["tau"]),
                   link=get_link(doc["link"]), df=int(doc["df"]), n=n, converged=True,
                   grid_policy=doc["grid_policy"], names=tuple(doc["names"]),
                   p=int(doc["p"]), q=int(doc["q"]))


# -- commands -------------------------------------------------------------------------

def cmd_prep_stanford(args):
    out = _outdir(args.out)
    snap = _config_snapshot(args)
    data = load_stanford(args.raw)
    path = os.path.join(out, "stanford.csv")
    write_csv(data, path)
    print(f"wrote {path}: {data.n_subjects} subjects, {data.n_rows} rows, "
          f"{int(data.delta.sum())} deaths")
    _write_manifest(out, "prep-stanford", snap, inputs=[args.raw] if args.raw else [],
                    outputs=[path])


def _fit_table(kind, fit, level):
    rows = []
    if kind == "t-cox":
        for r in cox_summary(fit, level):
            rows.append({"covariate": r["covariate"], "estimate": r["coef"], "se": r["se"],
                         "ci_low": float(np.log(r["ci_low"])),
                         "ci_high": float(np.log(r["ci_high"])), "p": r["p"], "effect": r["hr"],
                         "effect_low": r["ci_low"], "effect_high": r["ci_high"]})
    else:
        for r in fit.summary(level):
            rows.append({"covariate": r["covariate"], "estimate": r["coef"], "se": r["se"],
                         "ci_low": r["ci_low"], "ci_high": r["ci_high"], "p": r["p"],
                         "effect": r["coef"], "effect_low": r["ci_low"],
                         "effect_high": r["ci_high"]})
    return rows


def fit_model(data, kind, tau=None, link="identity", policy="followup-end", max_weight=None,
              weighting="double", ties="efron"):
    """Fit one of the three models; returns ``(fit, r2)``."""
    if kind == "t-cox":
        fit = fit_cox(data, "all", "outcome", ties=ties)
        return fit, nagelkerke_r2(fit)
    if tau is None:
        raise ConfigError("--tau is required for RMST models")
    fit, grid = fit_rmst_model(data, tau, link=link, policy=policy, max_weight=max_weight,
                               time_dependent=kind == "t-rmst", weighting=weighting)
    return fit, rmst_r2(fit, grid)


def cmd_fit(args):
    out = _outdir(args.out)
    snap = _config_snapshot(args)
    data = read_csv(args.data, _td_columns(args.schema_td))
    fit, r2 = fit_model(data, args.model, args.tau, args.link, args.grid_policy,
                        args.max_weight, args.weighting, args.ties)
    rows = _fit_table(args.model, fit, args.level)
    table = os.path.join(out, "coefficients.csv")
    write_rows(table, rows, FIT_COLUMNS)
    diag = os.path.join(out, "diagnostics.csv")
    write_rows(diag, [{"metric": "r2", "value": r2},
                      {"metric": "n_subjects", "value": data.n_subjects},
                      {"metric": "n_events", "value": int(data.delta.sum())}],
               ("metric", "value"))
    model = os.path.join(out, "model.json")
    _atomic_text(model, model_to_json(args.model, fit, r2, _sha256(args.data), args.weighting))
    label = "HR" if args.model == "t-cox" else "RMSTd"
    print(f"{KINDS[args.model]}  (R2 = {r2:.3f})")
    print(f"{'covariate':<14}{'coef':>9}{label:>9}{'95% CI':>22}{'p':>9}")
    for r in rows:
        ci = f"({r['effect_low']:.3f}, {r['effect_high']:.3f})"
        print(f"{r['covariate']:<14}{r['estimate']:>9.3f}{r['effect']:>9.3f}{ci:>22}"
              f"{r['p']:>9.3f}")
    _write_manifest(out, "fit", snap, inputs=[args.data], outputs=[table, diag, model])


def _parse_profile(items, names, parser):
    values = {}
    for item in items or ():
        if "=" not in item:
            parser.error(f"--set expects NAME=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        try:
            values[key.strip()] = float(val)
        except ValueError:
            parser.error(f"--set {key}: not a number: {val!r}")
    unknown = sorted(set(values) - set(names))
    if unknown:
        parser.error(f"unknown covariates {unknown}; model covariates are {list(names)}")
    missing = [nm for nm in names if nm not in values]
    if missing:
        parser.error("missing covariate values; required: "
                     + ", ".join(f"--set {nm}=VALUE" for nm in missing))
    return [values[nm] for nm in names]


def cmd_predict(args, parser):
    doc = load_model(args.model_file)
    fit = rmst_fit_from_model(doc)
    covs = fit.names[1:]
    profile = _parse_profile(args.set, covs, parser)
    mu, lo, hi = predict_rmst(fit, profile, args.level)
    print(f"{mu:.3f} [{lo:.3f}, {hi:.3f}]")


def cmd_simulate(args):
    out = _outdir(args.out)
    snap = _config_snapshot(args)
    overrides = {"seed": args.seed, "replicates": args.replicates}
    try:
        cfg = read_config(args.config, **overrides) if args.config else SimConfig(
            **{k: v for k, v in overrides.items() if v is not None})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    snap["resolved"] = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    dump = os.path.join(out, "replicates.csv")
    if args.study == "coefficients":
        truth = true_coefficients(cfg)
        report = run_coefficient_study(cfg, truth, dump=dump, workers=args.workers)
        table = os.path.join(out, "coefficient_study.csv")
        write_rows(table, report.rows(), COEF_STUDY_COLUMNS)
        for r in report.rows():
            print(f"{r['coefficient']:<12} true={r['true']:.4f} bias={r['bias']:.4f} "
                  f"mse={r['mse']:.4f} rmse={r['rmse']:.4f} rel_se={r['rel_se']:.4f} "
                  f"cp={r['cp']:.4f}")
    else:
        report = run_prediction_study(cfg, dump=dump, workers=args.workers)
        table = os.path.join(out, "prediction_study.csv")
        write_rows(table, report.rows(), PRED_STUDY_COLUMNS)
        for r in report.rows():
            pe = "" if r["prediction_error"] is None else f"{r['prediction_error']:.3f}"
            print(f"{r['model']:<8} C={r['c_index']:.3f} PE={pe}")
    snap["failures"] = report.failures
    snap["censoring_rate"] = report.censoring_rate
    _write_manifest(out, "simulate", snap, seed=cfg.seed,
                    inputs=[args.config] if args.config else [], outputs=[table, dump])


def cmd_evaluate(args):
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    out = _outdir(args.out)
    snap = _config_snapshot(args)
    data = read_csv(args.data, _td_columns(args.schema_td))
    models = [KINDS[m.strip()] for m in args.models.split(",")]
    reports, skipped, _ = repeated_evaluation(
        data, args.tau, models, args.fraction, args.repeats, args.seed, args.link,
        args.grid_policy, args.max_weight, args.weighting, args.ties)
    rows = [{"model": m, "c_index": r.c_index, "prediction_error": r.prediction_error,
             "n_test": r.n_test, "n_usable_pairs": r.n_usable_pairs,
             "repeats": args.repeats, "skipped_repeats": skipped}
            for m, r in reports.items()]
    table = os.path.join(out, "evaluation.csv")
    write_rows(table, rows, EVAL_COLUMNS)
    for r in rows:
        pe = "" if r["prediction_error"] is None else f"{r['prediction_error']:.3f}"
        print(f"{r['model']:<8} C={r['c_index']:.3f} PE={pe}")
    if skipped:
        print(f"{skipped} of {args.repeats} repeats skipped", file=sys.stderr)
    _write_manifest(out, "evaluate", snap, seed=args.seed, inputs=[args.data], outputs=[table])


# -- parser ---------------------------------------------------------------------------

def _model_options(p, tau_default=None):
    p.add_argument("--tau", type=float, default=tau_default, help="restriction horizon")
    p.add_argument("--link", choices=("identity", "log"), default="identity")
    p.add_argument("--grid-policy", choices=GRID_POLICIES, default="followup-end",
                   help="time points at which subjects enter the estimating equation")
    p.add_argument("--weighting", choices=WEIGHTINGS, default="double",
                   help="censoring weights: product of fixed and time-dependent "
                        "censoring models, or one joint model")
    p.add_argument("--max-weight", type=float, default=None, help="truncate weights")
    p.add_argument("--ties", choices=("breslow", "efron"), default="efron",
                   help="tie handling for the Cox model")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trmst", description="RMST regression with time-dependent covariates.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep-stanford", help="write the Stanford heart data as CSV")
    p.add_argument("--raw", default=None, help="raw jasa CSV (default: bundled copy)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep_stanford)

    p = sub.add_parser("fit", help="fit a model and write its coefficient table")
    p.add_argument("--data", required=True)
    p.add_argument("--schema-td", default="", metavar="COLS",
                   help="comma-separated time-dependent covariate columns")
    p.add_argument("--model", choices=tuple(KINDS), default="t-rmst")
    _model_options(p)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predicted RMST for one covariate profile")
    p.add_argument("--model-file", required=True)
    p.add_argument("--set", action="append", metavar="NAME=VALUE",
                   help="covariate value (repeat for every covariate)")
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_predict, handler="parser")

    p = sub.add_parser("simulate", help="Monte Carlo coefficient or prediction study")
    p.add_argument("--config", default=None, help="key = value study configuration")
    p.add_argument("--study", choices=("coefficients", "prediction"), default="coefficients")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (capped by RMST_TD_THREADS)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="repeated train/test evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--schema-td", default="", metavar="COLS")
    p.add_argument("--models", default="t-cox,t-rmst,f-rmst")
    _model_options(p, tau_default=None)
    p.add_argument("--fraction", type=_fraction, default=2 / 3)
    p.add_argument("--repeats", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser, sub


def main(argv=None):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate":
        unknown = [m for m in args.models.split(",") if m.strip() not in KINDS]
        if unknown:
            parser.error(f"unknown models {unknown}; choose from {list(KINDS)}")
        if args.tau is None:
            parser.error("evaluate needs --tau")
    try:
        if getattr(args, "handler", None) == "parser":
            args.func(args, sub.choices[args.command])
        else:
            args.func(args)
    except (TrmstError, OSError) as exc:
        print(f"trmst: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
