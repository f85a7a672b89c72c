"""Command line interface: ``tenar {simulate,fit,select,forecast,eval,inspect}``.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
Outputs are deterministic given inputs, flags and ``--seed``; creation times
go to ``<output>.meta.json`` sidecars only.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from importlib import metadata
from typing import Sequence

import numpy as np

from . import io as tio
from .errors import NumericalError, TenarError, ValidationError
from .estimators import FitOptions, fit_lse, fit_mle, proj_estimator
from .forecast_eval import BASELINES, EvalConfig, TenArMethod, predict_one, rolling_eval
from .inference import asymp_cov, conf_intervals
from .model import ModelSpec, SeparableNoise, causal, identifiability_check, var_coefficients
from .selection import Penalty, default_options, select_joint, select_separate
from .simulate import noise_cov, random_model, simulate_series, spawn_seeds

log = logging.getLogger("tenar")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


# -- argument helpers ---------------------------------------------------------

def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    if isinstance(text, int):
        return (text,)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


# flat config keys and their types; values become defaults for matching flags
CONFIG_SCHEMA = {
    "seed": int,
    "dims": _int_list,
    "p": int,
    "kranks": _int_list,
    "rho": float,
    "T": int,
    "burn_in": int,
    "setting": str,
    "estimator": str,
    "noise": str,
    "max_sweeps": int,
    "rel_tol": float,
    "ridge": float,
    "restarts": int,
    "pmax": int,
    "rmax": int,
    "penalty": str,
    "mode": str,
    "t0": int,
    "refit_every": int,
    "order": int,
    "detrend_alpha": float,
    "baselines": str,
    "level": float,
    "format": str,
}


def load_config(path) -> dict:
    raw = tio.read_json(path)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a flat JSON object")
    out = {}
    for key, value in raw.items():
        if key not in CONFIG_SCHEMA:
            raise ValidationError(f"{path}: unknown config key {key!r}")
        if isinstance(value, (dict,)) or (isinstance(value, list) and CONFIG_SCHEMA[key] is not _int_list):
            raise ValidationError(f"{path}: config key {key!r} must be a scalar")
        try:
            out[key] = CONFIG_SCHEMA[key](value)
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            raise ValidationError(f"{path}: bad value for {key!r}: {exc}") from None
    return out


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-sweeps", dest="max_sweeps", type=int, default=200)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=None)
    p.add_argument("--ridge", type=float, default=1e-10)
    p.add_argument("--restarts", type=int, default=10, help="random CP restarts in the projection start")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tenar", description="Tensor autoregression: simulate, fit, select, forecast.")
    parser.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    parser.add_argument("--config", help="flat JSON file whose keys provide flag defaults")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a random causal model and simulate a series")
    s.add_argument("--dims", type=_int_list, required=True, help="e.g. 3,3,3")
    s.add_argument("--p", type=int, default=None, help="order (defaults to the number of K-ranks)")
    s.add_argument("--kranks", type=_int_list, required=True, help="terms per lag, e.g. 2,2")
    s.add_argument("--rho", type=float, default=0.8)
    s.add_argument("--T", dest="T", type=int, required=True)
    s.add_argument("--burn-in", dest="burn_in", type=int, default=500)
    s.add_argument("--setting", choices=["I", "II", "III"], default="I")
    s.add_argument("--out", required=True, help="series file (.csv for text, anything else binary)")
    s.add_argument("--model-out", dest="model_out", help="where to write the generating model")
    s.add_argument("--format", choices=["csv", "bin"], default=None)

    f = sub.add_parser("fit", help="estimate a TenAR model")
    f.add_argument("--series", required=True)
    f.add_argument("--kranks", type=_int_list, required=True)
    f.add_argument("--p", type=int, default=None)
    f.add_argument("--estimator", choices=["proj", "lse", "mle"], default="lse")
    f.add_argument("--noise", choices=["dense", "separable"], default=None,
                   help="noise model (default: dense for proj/lse, separable for mle)")
    f.add_argument("--init", default="projection", help="'projection', a scalar, or a model file")
    _add_fit_options(f)
    f.add_argument("--out", required=True, help="model file (JSON)")
    f.add_argument("--report", help="fit report (JSON)")
    f.add_argument("--inference", action="store_true", help="add asymptotic standard errors and intervals")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--ci-out", dest="ci_out", help="per-entry intervals as CSV")

    sel = sub.add_parser("select", help="choose order and K-ranks by information criterion")
    sel.add_argument("--series", required=True)
    sel.add_argument("--pmax", type=int, required=True)
    sel.add_argument("--rmax", type=int, required=True)
    sel.add_argument("--penalty", type=str.upper, choices=["IC1", "IC2"], default="IC1")
    sel.add_argument("--mode", choices=["joint", "separate"], default="separate")
    _add_fit_options(sel)
    sel.add_argument("--out", required=True, help="selection report (JSON)")

    fc = sub.add_parser("forecast", help="one-step prediction after the last observation")
    fc.add_argument("--series", required=True)
    fc.add_argument("--model", required=True)
    fc.add_argument("--out", required=True, help="prediction as a one-observation series file")
    fc.add_argument("--format", choices=["csv", "bin"], default=None)

    ev = sub.add_parser("eval", help="rolling one-step forecast evaluation")
    ev.add_argument("--series", required=True)
    ev.add_argument("--t0", type=int, required=True, help="1-based index of the first predicted observation")
    ev.add_argument("--tenar", action="append", type=_int_list, default=[],
                    help="K-ranks of a TenAR model to evaluate (repeatable)")
    ev.add_argument("--estimator", choices=["lse", "mle"], default="lse")
    ev.add_argument("--baselines", default="VAR,MEAN", help=f"comma list from {','.join(BASELINES)}")
    ev.add_argument("--order", type=int, default=1, help="lag order of the iAR and VAR baselines")
    ev.add_argument("--refit-every", dest="refit_every", type=int, default=1, help="0 fits once")
    ev.add_argument("--detrend-alpha", dest="detrend_alpha", type=float, default=None)
    _add_fit_options(ev)
    ev.add_argument("--out", required=True, help="report (JSON)")
    ev.add_argument("--errors-out", dest="errors_out", help="per-origin squared errors (CSV)")

    ins = sub.add_parser("inspect", help="summarize a model file")
    ins.add_argument("--model", required=True)
    return parser


# -- commands -----------------------------------------------------------------

def _write_meta(path, argv: Sequence[str]) -> None:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    meta = {
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "argv": list(argv),
        "version": version,
    }
    tio.write_json(f"{path}.meta.json", meta)


def _fit_options(args, init="projection", selection: bool = False) -> FitOptions:
    base = default_options() if selection else FitOptions()
    rel_tol = args.rel_tol if args.rel_tol is not None else base.rel_tol
    return FitOptions(max_sweeps=args.max_sweeps, rel_tol=rel_tol, ridge=args.ridge,
                      init=init, restarts=args.restarts, seed=args.seed)


def _spec(dims, kranks, p=None) -> ModelSpec:
    kranks = tuple(kranks)
    if p is not None:
        if p < len(kranks) and any(kranks[p:]):
            raise ValidationError(f"--p {p} conflicts with K-ranks {kranks}")
        kranks = (kranks + (0,) * p)[:p]
    return ModelSpec(tuple(dims), kranks)


def cmd_simulate(args, argv) -> dict:
    spec = _spec(args.dims, args.kranks, args.p)
    s_model, s_noise, s_series = spawn_seeds(args.seed, 3)
    noise = noise_cov(args.setting, spec.dims, seed=s_noise)
    model = random_model(spec, args.rho, seed=s_model, noise=noise)
    x = simulate_series(model, args.T, burn_in=args.burn_in, seed=s_series)
    tio.write_series(args.out, x, args.format)
    _write_meta(args.out, argv)
    if args.model_out:
        tio.write_model(args.model_out, model)
        _write_meta(args.model_out, argv)
    return {"series": args.out, "T": args.T, "dims": list(spec.dims), "radius": causal(model).radius}


def _parse_init(text: str):
    if text == "projection":
        return "projection"
    try:
        return float(text)
    except ValueError:
        return tio.read_model(text)


def cmd_fit(args, argv) -> dict:
    x = tio.read_series(args.series)
    spec = _spec(x.shape[1:], args.kranks, args.p)
    noise = args.noise or ("separable" if args.estimator == "mle" else "dense")
    if args.estimator == "mle" and noise != "separable":
        raise ValidationError("MLE requires separable covariance (use --noise separable)")
    opts = _fit_options(args, init=_parse_init(args.init))
    report = None
    if args.estimator == "proj":
        model = proj_estimator(x, spec, seed=args.seed, separable=noise == "separable",
                               restarts=args.restarts, ridge=args.ridge)
    else:
        report = (fit_mle if args.estimator == "mle" else fit_lse)(x, spec, opts)
        model = report.model
    tio.write_model(args.out, model)
    _write_meta(args.out, argv)
    summary = {"model": args.out, "estimator": args.estimator, "kranks": list(spec.kranks)}
    if report is not None:
        summary.update(sweeps=report.sweeps_used, converged=report.converged, objective=report.objective)
    if args.report or args.inference or args.ci_out:
        body = {
            "estimator": args.estimator,
            "dims": list(spec.dims),
            "kranks": list(spec.kranks),
            "objective_trace": report.objective_trace if report else [],
            "sweeps_used": report.sweeps_used if report else 0,
            "converged": report.converged if report else True,
            "flags": report.flags if report else [],
        }
        if args.inference or args.ci_out:
            if args.estimator == "proj":
                raise ValidationError("inference is available for lse and mle fits only")
            inf = asymp_cov(x, model, args.estimator)
            ci = conf_intervals(model, inf, args.level)
            rows = [
                {"lag": lab[0], "term": lab[1], "mode": lab[2], "row": lab[3], "col": lab[4],
                 "estimate": float(e), "stderr": float(se), "lower": float(lo), "upper": float(hi)}
                for lab, e, se, lo, hi in zip(ci.labels, ci.estimate, inf.stderr, ci.lower, ci.upper)
            ]
            body["inference"] = {"method": inf.method, "level": args.level, "entries": rows}
            if args.ci_out:
                header = list(rows[0].keys()) if rows else []
                tio.write_table_csv(args.ci_out, header, [list(r.values()) for r in rows])
                _write_meta(args.ci_out, argv)
        if args.report:
            tio.write_json(args.report, body)
            _write_meta(args.report, argv)
    return summary


def cmd_select(args, argv) -> dict:
    x = tio.read_series(args.series)
    opts = _fit_options(args, selection=True)
    run = select_joint if args.mode == "joint" else select_separate
    rep = run(x, args.pmax, args.rmax, Penalty(args.penalty), opts)
    body = {
        "procedure": rep.procedure,
        "penalty": rep.penalty.value,
        "n_obs": rep.n_obs,
        "chosen": list(rep.chosen),
        "order": rep.order,
        "grid": rep.table(),
    }
    tio.write_json(args.out, body)
    _write_meta(args.out, argv)
    return {"chosen": list(rep.chosen), "order": rep.order}


def cmd_forecast(args, argv) -> dict:
    x = tio.read_series(args.series)
    model = tio.read_model(args.model)
    if x.shape[1:] != model.dims:
        raise ValidationError(f"series dims {x.shape[1:]} do not match model dims {model.dims}")
    p = model.spec.p
    if x.shape[0] < p:
        raise ValidationError(f"need at least p={p} observations")
    pred = predict_one(model, [x[-1 - i] for i in range(p)])
    tio.write_series(args.out, pred[None], args.format)
    _write_meta(args.out, argv)
    return {"prediction": args.out}


def cmd_eval(args, argv) -> dict:
    x = tio.read_series(args.series)
    methods = [TenArMethod(tuple(kr), args.estimator) for kr in args.tenar]
    methods += [b.strip() for b in args.baselines.split(",") if b.strip()]
    cfg = EvalConfig(args.t0, args.refit_every, args.order, args.detrend_alpha, _fit_options(args))
    rep = rolling_eval(x, methods, cfg)
    body = {"t0": rep.t0, "count": rep.count, "total": rep.total, "table": rep.table(),
            "fallbacks": {k: [int(t) for t in v] for k, v in rep.flags.items()}}
    tio.write_json(args.out, body)
    _write_meta(args.out, argv)
    if args.errors_out:
        names = list(rep.errors)
        rows = [[rep.t0 + j] + [float(rep.errors[n][j]) for n in names] for j in range(rep.count)]
        tio.write_table_csv(args.errors_out, ["t"] + names, rows)
        _write_meta(args.errors_out, argv)
    return {"mse": rep.mse, "total": rep.total}


def cmd_inspect(args, argv) -> dict:
    model = tio.read_model(args.model)
    c = causal(model)
    out = {
        "dims": list(model.dims),
        "kranks": list(model.spec.kranks),
        "n_params": model.spec.n_params,
        "noise": model.noise.kind,
        "causal": bool(c.causal),
        "spectral_radius": c.radius,
        "phi_norms": [float(np.linalg.norm(ph)) for ph in var_coefficients(model)],
        "factor_norms": [
            [[float(np.linalg.norm(a)) for a in term] for term in lag] for lag in model.coeffs
        ],
    }
    if isinstance(model.noise, SeparableNoise):
        out["noise_factor_norms"] = [float(np.linalg.norm(s)) for s in model.noise.factors]
    if model.spec.K >= 2:
        out["identifiability"] = [
            {"lag": r.lag, "terms": r.n_terms, "holds": r.holds, "reason": r.reason}
            for r in identifiability_check(model)
        ]
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        cfg = load_config(known.config)
        parser.set_defaults(**{k: v for k, v in cfg.items() if k == "seed"})
        sub = parser._subparsers._group_actions[0].choices  # noqa: SLF001
        for sp in sub.values():
            dests = {a.dest for a in sp._actions}  # noqa: SLF001
            sp.set_defaults(**{k: v for k, v in cfg.items() if k in dests})
            for action in sp._actions:  # noqa: SLF001
                if action.dest in cfg and action.required:
                    action.required = False
    args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        result = COMMANDS[args.command](args, argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TenarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
