"""``relcusum`` command-line interface.

Subcommands: ``fit``, ``calibrate``, ``run``, ``simulate``, ``study``.

Every option can also be given in an INI file (``--config``) under a section
named after the subcommand, with dashes in option names replaced by
underscores. Command-line flags win over the file. A relative ``--config``
path is looked up in ``$RELCUSUM_CONFIG_DIR`` when that variable is set.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__, presets
from .alternatives import make_alternative
from .calibration import (
    CalibrationSpec,
    MonitoringSetup,
    calibrate_threshold,
    upper_quantile,
    simulate_max_statistics,
)
from .chart import MonitoringConfig, UpdateScheme, run_chart, write_path_csv
from .errors import (
    ConfigurationError,
    ModelInconsistencyError,
    ParseError,
    RelCusumError,
    SupportError,
    ValidationError,
)
from .excess_model import CovariateSchema, load_model, parse_schema_section, save_model
from .experiments import estimate_censoring_rate, get_study, run_study
from .fit import FitSpec, fit_excess_model
from .lifetable import load_life_table
from .records import Cohort, read_patients, write_patients
from .simulate import ArrivalProcess, BootstrapCovariates, CensoringSpec, ShiftScenario, simulate_cohort

log = logging.getLogger("relcusum")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
CONFIG_DIR_ENV = "RELCUSUM_CONFIG_DIR"
BUILTIN = "builtin"


class NumericalFailure(RelCusumError):
    pass


# -- small helpers -------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _alternatives(text: str):
    """``kind:value[,kind:value...]``."""
    out = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        kind, _, value = item.partition(":")
        if not value:
            raise ValidationError(f"bad alternative {item!r}; expected kind:value, e.g. proportional:0.8")
        try:
            out.append(make_alternative(kind, float(value)))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    if not out:
        raise ValidationError("no alternative given")
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        moment = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return moment.isoformat()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_manifest(args, inputs: dict, outputs: list) -> None:
    manifest = {
        "command": args.command,
        "config": args.config,
        "seed": getattr(args, "seed", None),
        "inputs": {k: (_sha256(v) if v and os.path.exists(v) else v) for k, v in sorted(inputs.items())},
        "outputs": sorted(str(o) for o in outputs),
        "timestamp": _timestamp(),
        "version": __version__,
    }
    path = args.manifest or os.path.join(args.out_dir, f"{args.command}_manifest.json")
    _write_json(path, manifest)


def _table(spec):
    if spec in (None, "", BUILTIN):
        return presets.norway_like_table(years=range(1950, 2041))
    return load_life_table(spec)


def _model(spec, alts=(), horizon=None, extend=False):
    if spec in (None, "", BUILTIN, "builtin:piecewise"):
        model = presets.piecewise_model()
    elif spec == "builtin:weibull":
        model = presets.weibull_model()
    else:
        model = load_model(spec)
    if extend:
        # accelerated alternatives with k > 1 read the baseline beyond its last cut
        need = max([a.required_support(model.support_end) for a in alts] + [model.support_end])
        model = model.extended_to(need)
    return model


def _schema(path):
    if path in (None, "", BUILTIN):
        return presets.SCHEMA
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"schema file {path} not found")
    if "covariates" not in cp:
        raise ParseError(f"{path}: no [covariates] section")
    return parse_schema_section(cp["covariates"])


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _setup_from_args(args, alt, covariates=None, censor_rate=None, arrival_rate=None, horizon=None, start_year=None):
    return MonitoringSetup(
        ArrivalProcess(args.lambda_a if arrival_rate is None else arrival_rate),
        covariates if covariates is not None else presets.covariate_source(),
        CensoringSpec(args.censor_rate if censor_rate is None else censor_rate),
        alt,
        args.t_m if horizon is None else horizon,
        args.scheme,
        args.t_d,
        args.start_year if start_year is None else start_year,
    )


# -- subcommands ---------------------------------------------------------------------


def cmd_fit(args) -> int:
    table = _table(args.life_table)
    schema = _schema(args.schema)
    cohort = read_patients(args.patients, schema)
    res = fit_excess_model(cohort, table, FitSpec(tuple(args.bands), args.tol, args.max_iter), schema)
    _ensure_dir(args.out_dir)
    model_path = args.out or os.path.join(args.out_dir, "model.ini")
    report_path = os.path.join(args.out_dir, "fit_report.json")
    report = {
        "converged": res.converged,
        "iterations": res.iterations,
        "loglik": res.loglik,
        "grad_norm": res.grad_norm,
        "flags": list(res.flags),
        "coefficients": dict(zip(schema.columns, map(float, res.beta))),
        "log_levels": [float(v) for v in res.chi],
        "se": [float(v) for v in res.se],
        "n_records": len(cohort),
        "n_events": int(cohort.event.sum()),
    }
    _write_json(report_path, report)
    if not res.converged and not args.allow_unconverged:
        raise NumericalFailure(f"fit did not converge (gradient norm {res.grad_norm:.3g}); see {report_path}")
    save_model(res.model, model_path)
    _write_manifest(args, {"patients": args.patients, "life_table": args.life_table, "schema": args.schema},
                    [model_path, report_path])
    print(f"fitted model written to {model_path} (loglik {res.loglik:.6f}, converged {res.converged})")
    return 0


def _calibration_setup(args, alt):
    covariates = None
    if args.covariates_from:
        model = _model(args.model)
        pool = read_patients(args.covariates_from, model.schema)
        covariates = BootstrapCovariates(pool)
    return _setup_from_args(args, alt, covariates)


def cmd_calibrate(args) -> int:
    table = _table(args.life_table)
    (alt,) = _alternatives(args.alt)[:1]
    model = _model(args.model, [alt], extend=args.extend_last_band)
    setup = _calibration_setup(args, alt)
    res = calibrate_threshold(CalibrationSpec(setup, args.alpha, args.n), model, table, args.seed, args.workers)
    _ensure_dir(args.out_dir)
    out = args.out or os.path.join(args.out_dir, "calibration.ini")
    cp = configparser.ConfigParser(interpolation=None)
    cp["calibration"] = {
        "c": repr(res.c),
        "alpha": repr(float(args.alpha)),
        "n": str(res.n),
        "seed": str(args.seed),
        "se": repr(res.se),
        "alternative": f"{alt.kind}:{alt.parameter!r}",
        "horizon": repr(float(args.t_m)),
        "scheme": setup.scheme.value,
    }
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        cp.write(fh)
    outputs = [out]
    if args.histogram:
        counts, edges = np.histogram(res.W, bins=args.bins)
        with open(args.histogram, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("lower,upper,count\n")
            for lo, hi, k in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{float(lo)!r},{float(hi)!r},{int(k)}\n")
        outputs.append(args.histogram)
    _write_manifest(args, {"model": args.model, "life_table": args.life_table,
                           "covariates_from": args.covariates_from}, outputs)
    print(f"c = {res.c:.6g} (alpha = {args.alpha}, N = {res.n}, MC se = {res.se:.3g})")
    return 0


def _read_threshold(args, alt=None) -> float:
    if args.threshold is not None:
        return float(args.threshold)
    if args.calibration:
        cp = configparser.ConfigParser(interpolation=None)
        if not cp.read(args.calibration, encoding="utf-8") or "calibration" not in cp:
            raise ConfigurationError(f"calibration file {args.calibration} missing or lacks [calibration]")
        return float(cp["calibration"]["c"])
    raise ConfigurationError("no threshold: give --threshold or --calibration (use 'inf' to never signal)")


def _label(alt) -> str:
    return f"{alt.kind}_{alt.parameter:g}"


def _chart_report(path, alt, c):
    return {
        "alternative": alt.kind,
        "parameter": alt.parameter,
        "threshold": c,
        "signalled": path.signalled,
        "signal_time": path.signal_time,
        "max_psi": float(np.max(path.psi)) if len(path.psi) else 0.0,
    }


def cmd_run(args) -> int:
    if args.rolling:
        return _run_rolling(args)
    table = _table(args.life_table)
    alts = _alternatives(args.alt)
    model = _model(args.model, alts, extend=args.extend_last_band)
    c = _read_threshold(args)
    cohort = read_patients(args.patients, model.schema)
    horizon = args.t_m
    if horizon is None:
        horizon = float(np.max(cohort.arrival + cohort.follow_up)) if len(cohort) else 1.0
    _ensure_dir(args.out_dir)
    outputs, reports = [], []
    for alt in alts:
        cfg = MonitoringConfig(horizon, c, args.scheme, args.t_d)
        path = run_chart(cohort, model, table, alt, cfg)
        dest = os.path.join(args.out_dir, f"chart_{_label(alt)}.csv")
        write_path_csv(path, dest)
        outputs.append(dest)
        reports.append(_chart_report(path, alt, c))
    report_path = os.path.join(args.out_dir, "run_report.json")
    _write_json(report_path, {"horizon": horizon, "scheme": UpdateScheme.parse(args.scheme).value, "charts": reports})
    outputs.append(report_path)
    _write_manifest(args, {"model": args.model, "life_table": args.life_table, "patients": args.patients}, outputs)
    for r in reports:
        state = f"signal at t = {r['signal_time']:.4f}" if r["signalled"] else "no signal"
        print(f"{r['alternative']}({r['parameter']:g}): {state}")
    return 0


def _window(cohort: Cohort, start: float, end: float) -> Cohort:
    """Patients entering in ``[start, end)`` observed until ``end``, with arrival relative to ``start``."""
    sub = cohort.subset((cohort.entry_year >= start) & (cohort.entry_year < end))
    limit = end - sub.entry_year
    over = sub.follow_up > limit
    return Cohort(
        sub.entry_year - start, sub.sex, sub.age, sub.entry_year, sub.X,
        np.where(over, limit, sub.follow_up), sub.event & ~over,
    )


def _run_rolling(args) -> int:
    """Fit on each window, monitor the next: ``k`` boundaries give ``k - 2`` pairs."""
    table = _table(args.life_table)
    schema = _schema(args.schema)
    alts = _alternatives(args.alt)
    bounds = list(args.windows)
    if len(bounds) < 3 or any(b <= a for a, b in zip(bounds, bounds[1:])):
        raise ConfigurationError("--windows needs at least 3 increasing calendar boundaries")
    everyone = read_patients(args.patients, schema)
    _ensure_dir(args.out_dir)
    outputs, summary = [], []
    for i in range(len(bounds) - 2):
        w0, w1, w2 = bounds[i], bounds[i + 1], bounds[i + 2]
        base = _window(everyone, w0, w1)
        mon = _window(everyone, w1, w2)
        fit = fit_excess_model(base, table, FitSpec(tuple(args.bands), args.tol, args.max_iter), schema)
        if not fit.converged and not args.allow_unconverged:
            raise NumericalFailure(f"baseline fit for {w0:g}-{w1:g} did not converge")
        tag = f"{w1:g}-{w2:g}"
        model_path = os.path.join(args.out_dir, f"model_{w0:g}-{w1:g}.ini")
        save_model(fit.model, model_path)
        outputs.append(model_path)
        horizon = w2 - w1
        for j, alt in enumerate(alts):
            if args.threshold is not None:
                c = float(args.threshold)
            else:
                setup = _setup_from_args(
                    args, alt, BootstrapCovariates(base), estimate_censoring_rate(base, w1 - w0),
                    arrival_rate=len(base) / (w1 - w0), horizon=horizon, start_year=w1,
                )
                seed = np.random.SeedSequence(int(args.seed), spawn_key=(i, j))
                W = simulate_max_statistics(setup, fit.model, table, args.n, seed, workers=args.workers)
                c = upper_quantile(W, args.alpha)
                if c <= 0:
                    c = math.inf
            path = run_chart(mon, fit.model, table, alt, MonitoringConfig(horizon, c, args.scheme, args.t_d))
            dest = os.path.join(args.out_dir, f"chart_{tag}_{_label(alt)}.csv")
            write_path_csv(path, dest)
            outputs.append(dest)
            summary.append({"baseline": f"{w0:g}-{w1:g}", "monitor": tag, **_chart_report(path, alt, c)})
    report_path = os.path.join(args.out_dir, "rolling_report.json")
    _write_json(report_path, {"pairs": len(bounds) - 2, "charts": summary})
    outputs.append(report_path)
    _write_manifest(args, {"life_table": args.life_table, "patients": args.patients, "schema": args.schema}, outputs)
    print(f"{len(bounds) - 2} baseline/monitor pairs, {len(summary)} charts written to {args.out_dir}")
    return 0


def cmd_simulate(args) -> int:
    model = _model(args.model)
    table = _table(args.life_table)
    alt = _alternatives(args.alt)[0] if args.alt else None
    scenario = ShiftScenario.parse(args.scenario, alt)
    rng = np.random.default_rng(np.random.SeedSequence(int(args.seed)))
    source = presets.covariate_source()
    if model.schema.columns != presets.SCHEMA.columns:
        raise ConfigurationError("simulate draws the built-in covariate set; the model must use the same schema")
    cohort = simulate_cohort(
        ArrivalProcess(args.lambda_a), source, model, table, CensoringSpec(args.censor_rate),
        scenario, args.t_m, rng, start_year=args.start_year,
    )
    _ensure_dir(args.out_dir)
    out = args.out or os.path.join(args.out_dir, "patients.csv")
    write_patients(cohort, model.schema, out)
    _write_manifest(args, {"model": args.model, "life_table": args.life_table}, [out])
    print(f"{len(cohort)} patients ({int(cohort.event.sum())} events) written to {out}")
    return 0


def cmd_study(args) -> int:
    spec = get_study(args.name)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=int(args.seed))
    spec = spec.scaled(args.scale)
    table = _table(args.life_table)
    result = run_study(spec, table, workers=args.workers)
    _ensure_dir(args.out_dir)
    out = os.path.join(args.out_dir, f"{spec.name}.csv")
    result.write_csv(out)
    summary_path = os.path.join(args.out_dir, f"{spec.name}_summary.json")
    _write_json(summary_path, result.manifest())
    _write_manifest(args, {"life_table": args.life_table}, [out, summary_path])
    print(f"{spec.name}: {len(result.rows)} rows written to {out}")
    return 0


# -- parser --------------------------------------------------------------------------


def _common(p, seed=True):
    p.add_argument("--config", help="INI file with a section per subcommand")
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: current)")
    p.add_argument("--manifest", help="manifest path (default: <out-dir>/<command>_manifest.json)")
    p.add_argument("--life-table", default=BUILTIN, help="life-table CSV or 'builtin'")
    p.add_argument("-v", "--verbose", action="count", default=0)
    if seed:
        p.add_argument("--seed", type=int, default=1)


def _extend(p):
    p.add_argument("--extend-last-band", type=_bool, nargs="?", const=True, default=False,
                   help="extend the last baseline band as far as the alternatives need")


def _monitoring(p, t_m_default=10.0):
    p.add_argument("--scheme", default="continuous", choices=[s.value for s in UpdateScheme])
    p.add_argument("--t-d", type=float, default=None, help="follow-up cap in years")
    p.add_argument("--t-m", type=float, default=t_m_default, help="monitoring horizon in years")


def _simulation(p):
    p.add_argument("--lambda-a", type=float, default=250.0, help="arrivals per year")
    p.add_argument("--censor-rate", type=float, default=presets.CENSOR_RATE)
    p.add_argument("--start-year", type=float, default=presets.START_YEAR)


def _fitting(p):
    p.add_argument("--bands", type=_float_list, default="0,1,2,3,4,5,10", help="cut points")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--allow-unconverged", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--schema", default=BUILTIN, help="INI file with a [covariates] section, or 'builtin'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relcusum", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the in-control excess hazard model")
    _common(p, seed=False)
    p.add_argument("--patients", required=True)
    p.add_argument("--out", help="model file (default: <out-dir>/model.ini)")
    _fitting(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", help="Monte Carlo threshold for a target false-signal probability")
    _common(p)
    p.add_argument("--model", default=BUILTIN)
    p.add_argument("--alt", default="proportional:0.8", help="kind:value")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--covariates-from", help="patient CSV to bootstrap covariates from")
    p.add_argument("--out", help="result file (default: <out-dir>/calibration.ini)")
    p.add_argument("--histogram", help="optional CSV of W histogram counts")
    p.add_argument("--bins", type=int, default=50)
    _monitoring(p)
    _simulation(p)
    _extend(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="compute CUSUM charts on monitoring data")
    _common(p)
    p.add_argument("--model", default=BUILTIN)
    p.add_argument("--patients", required=True)
    p.add_argument("--alt", default="proportional:0.8", help="kind:value[,kind:value...]")
    p.add_argument("--threshold", type=float)
    p.add_argument("--calibration", help="calibration result file to take c from")
    p.add_argument("--rolling", type=_bool, nargs="?", const=True, default=False,
                   help="fit on each calendar window and monitor the next")
    p.add_argument("--windows", type=_float_list, default="1970,1980,1990,2000,2010,2020")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n", type=int, default=200, help="calibration replications in rolling mode")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--censor-rate", type=float, default=presets.CENSOR_RATE)
    _fitting(p)
    p.add_argument("--scheme", default="continuous", choices=[s.value for s in UpdateScheme])
    p.add_argument("--t-d", type=float, default=None)
    p.add_argument("--t-m", type=float, default=None, help="horizon (default: end of the data)")
    _extend(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="write a synthetic patient CSV")
    _common(p)
    p.add_argument("--model", default=BUILTIN)
    p.add_argument("--scenario", default="in_control", help="in_control | all_from:<eta> | new_from:<eta>")
    p.add_argument("--alt", default=None, help="out-of-control alternative for shift scenarios")
    p.add_argument("--out", help="CSV path (default: <out-dir>/patients.csv)")
    p.add_argument("--t-m", type=float, default=10.0)
    _simulation(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="run a built-in simulation study")
    _common(p, seed=False)
    p.add_argument("name", choices=["table2", "table3", "table4", "acc-table", "fig3", "fig5"])
    p.add_argument("--scale", type=float, default=1.0, help="multiply all replication counts")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_study)
    return parser


def _config_path(path: str) -> str:
    if os.path.isabs(path) or os.path.exists(path):
        return path
    base = os.environ.get(CONFIG_DIR_ENV)
    if base:
        return os.path.join(base, path)
    return path


def _apply_config(parser, argv):
    """Re-parse with config-file values installed as defaults (flags still win)."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = _config_path(args.config)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        found = cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigurationError(f"config file {path}: {exc}") from None
    if not found:
        raise ConfigurationError(f"config file {path} not found")
    if not cp.has_section(args.command):
        return args
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    values = {}
    for key, value in cp[args.command].items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "func", "help"):
            raise ConfigurationError(f"config file {path}: unknown option {key!r} in [{args.command}]")
        values[dest] = value
    subparser.set_defaults(**values)
    args = parser.parse_args(argv)
    args.config = path
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        logging.captureWarnings(True)
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ModelInconsistencyError, NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SupportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigurationError, ValidationError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
