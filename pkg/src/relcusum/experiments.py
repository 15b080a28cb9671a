"""Scripted simulation studies: signal-ratio tables and the estimation-error study.

Built-in specs (see :data:`STUDIES`):

``table2``    proportional chart, lambda_a = 250, 10 years, shift at 5 years
``table3``    proportional chart, lambda_a = 3700, 5 years, shift at 2.5 years
``table4``    additive chart, lambda_a = 3700, 10 years, shift at 5 years
``acc-table`` accelerated-time chart, lambda_a = 3700, 10 years, shift at 5 years
``fig3``      estimation error, piecewise truth, piecewise estimator
``fig5``      estimation error, Weibull truth, piecewise estimator

All randomness descends from ``spec.seed`` through ``SeedSequence`` spawn
keys, so each cell is reproducible on its own and independent of the others.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__, presets
from .alternatives import make_alternative
from .calibration import (
    EVALUATION_STREAM,
    MonitoringSetup,
    binomial_se,
    quantile_se,
    replication_rng,
    signal_probability,
    simulate_max_statistics,
    upper_quantile,
)
from .errors import ConfigurationError, RelCusumError, ValidationError
from .fit import FitSpec, fit_excess_model
from .simulate import ArrivalProcess, BootstrapCovariates, CensoringSpec, ShiftScenario, simulate_cohort

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudySpec:
    name: str
    kind: str = "signal_table"                  # or "estimation_error"
    alternative: str = "proportional"
    parameters: tuple = (0.8,)
    alphas: tuple = (0.01, 0.05)
    scenarios: tuple = ("all_from:0",)
    arrival_rate: float = 250.0
    horizon: float = 10.0
    n_cal: int = 1000
    m_eval: int = 1000
    seed: int = 1
    truth: str = "piecewise"                    # or "weibull"
    estimator: str = "piecewise"
    covariate_mode: str = "true"                # or "bootstrap"
    outer: int = 200
    baseline_years: float = 10.0
    start_year: float = presets.START_YEAR
    extend_last_band: bool = False

    def __post_init__(self):
        if self.kind not in ("signal_table", "estimation_error"):
            raise ValidationError(f"unknown study kind {self.kind!r}")
        if self.truth not in ("piecewise", "weibull"):
            raise ValidationError(f"unknown truth model {self.truth!r}")
        if self.estimator != "piecewise":
            raise ValidationError("only the piecewise estimator is available")
        if self.covariate_mode not in ("true", "bootstrap"):
            raise ValidationError(f"unknown covariate mode {self.covariate_mode!r}")
        for name in ("n_cal", "m_eval", "outer"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for a in self.alphas:
            if not 0 < a < 1:
                raise ValidationError(f"alpha must lie in (0, 1), got {a}")

    def scaled(self, factor: float) -> "StudySpec":
        """Replication counts multiplied by ``factor`` (at least 1 each)."""
        if not factor > 0:
            raise ValidationError("scale must be > 0")
        n = lambda v: max(1, int(math.ceil(v * factor)))  # noqa: E731
        return dataclasses.replace(self, n_cal=n(self.n_cal), m_eval=n(self.m_eval), outer=n(self.outer))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


STUDIES = {
    "table2": StudySpec(
        "table2", parameters=(0.8, 0.9, 1.1, 1.2),
        scenarios=("all_from:0", "all_from:5", "new_from:5"),
        arrival_rate=250.0, horizon=10.0, n_cal=10_000, m_eval=10_000,
    ),
    "table3": StudySpec(
        "table3", parameters=(0.9, 0.95, 1.05, 1.1),
        scenarios=("all_from:0", "all_from:2.5", "new_from:2.5"),
        arrival_rate=3700.0, horizon=5.0, n_cal=1000, m_eval=1000,
    ),
    "table4": StudySpec(
        "table4", alternative="additive", parameters=(-0.002, 0.002, 0.005),
        scenarios=("all_from:0", "all_from:5", "new_from:5"),
        arrival_rate=3700.0, horizon=10.0, n_cal=1000, m_eval=1000,
    ),
    "acc-table": StudySpec(
        "acc-table", alternative="accelerated", parameters=(0.9, 0.95, 1.05, 1.1),
        scenarios=("all_from:0", "all_from:5", "new_from:5"),
        arrival_rate=3700.0, horizon=10.0, n_cal=1000, m_eval=1000, extend_last_band=True,
    ),
    "fig3": StudySpec(
        "fig3", kind="estimation_error", parameters=(0.9,), alphas=(0.05,), scenarios=("in_control",),
        arrival_rate=3750.0, horizon=5.0, n_cal=500, m_eval=500, outer=200, truth="piecewise",
    ),
    "fig5": StudySpec(
        "fig5", kind="estimation_error", parameters=(0.9,), alphas=(0.05,), scenarios=("in_control",),
        arrival_rate=3750.0, horizon=5.0, n_cal=500, m_eval=500, outer=200, truth="weibull",
    ),
}


def get_study(name: str) -> StudySpec:
    try:
        return STUDIES[name]
    except KeyError:
        raise ConfigurationError(f"unknown study {name!r}; choose from {', '.join(STUDIES)}") from None


@dataclass
class StudyResult:
    spec: StudySpec
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def columns(self) -> list[str]:
        return list(self.rows[0]) if self.rows else []

    def write_csv(self, path_or_stream) -> None:
        close = isinstance(path_or_stream, (str, os.PathLike))
        fh = open(path_or_stream, "w", newline="", encoding="utf-8") if close else path_or_stream
        try:
            w = csv.writer(fh, lineterminator="\n")
            cols = self.columns()
            w.writerow(cols)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in cols])
        finally:
            if close:
                fh.close()

    def manifest(self) -> dict:
        return {
            "study": self.spec.name,
            "seed": self.spec.seed,
            "spec_sha256": self.spec.digest(),
            "code_version": __version__,
            "spec": self.spec.to_dict(),
            "summary": self.summary,
        }


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# -- shared set-up ------------------------------------------------------------------


def study_table():
    """Synthetic life table covering every calendar year the studies touch."""
    return presets.norway_like_table(years=range(1990, 2031))


def truth_model(spec: StudySpec):
    return presets.weibull_model() if spec.truth == "weibull" else presets.piecewise_model()


def _cell_seed(spec: StudySpec, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(spec.seed), spawn_key=tuple(int(k) for k in key))


def _setup(spec, alt, covariates=None, censoring=None) -> MonitoringSetup:
    return MonitoringSetup(
        ArrivalProcess(spec.arrival_rate),
        covariates if covariates is not None else presets.covariate_source(),
        censoring if censoring is not None else presets.censoring(),
        alt,
        spec.horizon,
        start_year=spec.start_year,
    )


# -- signal tables --------------------------------------------------------------------


def run_signal_table(spec: StudySpec, table=None, workers: int = 1) -> StudyResult:
    """Calibrate each chart in-control, then estimate signal ratios per scenario.

    One calibration run per parameter value serves every ``alpha``; every
    scenario of a parameter value is evaluated on common random numbers.
    """
    table = table if table is not None else study_table()
    result = StudyResult(spec)
    for ip, value in enumerate(spec.parameters):
        alt = make_alternative(spec.alternative, value)
        model = truth_model(spec)
        if spec.extend_last_band:
            model = model.extended_to(max(model.support_end, alt.required_support(model.support_end)))
        setup = _setup(spec, alt)
        seed = _cell_seed(spec, ip)
        W = simulate_max_statistics(setup, model, table, spec.n_cal, seed, workers=workers)
        thresholds = {a: upper_quantile(W, a) for a in spec.alphas}
        for s in spec.scenarios:
            scenario = ShiftScenario.parse(s, alt)
            if scenario.kind == "in_control":
                scenario = ShiftScenario.in_control()
            W1 = simulate_max_statistics(
                setup, model, table, spec.m_eval, seed, scenario, stream=EVALUATION_STREAM, workers=workers
            )
            for a in spec.alphas:
                p = signal_probability(W1, thresholds[a])
                result.rows.append({
                    "alternative": alt.kind, "parameter": float(value), "alpha": float(a),
                    "c": thresholds[a], "c_se": quantile_se(W, a), "scenario": scenario.label(),
                    "ratio": p, "se": binomial_se(p, spec.m_eval),
                    "n_cal": int(spec.n_cal), "m_eval": int(spec.m_eval),
                })
            log.info("%s %s=%g %s done", spec.name, alt.kind, value, scenario.label())
    return result


# -- estimation error -----------------------------------------------------------------


def estimate_censoring_rate(cohort, window_end: float) -> float:
    """Interim censoring rate: censorings before the administrative end over person-time."""
    admin = window_end - cohort.arrival
    interim = (~cohort.event) & (cohort.follow_up < admin - 1e-9)
    pt = float(np.sum(cohort.follow_up))
    return float(interim.sum() / pt) if pt > 0 else 0.0


def simulate_baseline(spec: StudySpec, model, table, rng):
    """Baseline data set: ``baseline_years`` of arrivals ending where monitoring starts."""
    return simulate_cohort(
        ArrivalProcess(spec.arrival_rate), presets.covariate_source(), model, table, presets.censoring(),
        ShiftScenario.in_control(), spec.baseline_years, rng,
        start_year=spec.start_year - spec.baseline_years,
    )


def run_estimation_error_study(spec: StudySpec, table=None, workers: int = 1, fitted=None) -> StudyResult:
    """Distribution of achieved in-control signal probabilities under estimation error.

    For each outer replication: simulate baseline data from the truth, fit the
    piecewise estimator, calibrate ``c`` treating the fit as true, then chart
    data from the truth with the fitted model. ``fitted`` (a model) skips the
    fitting step and is used in every outer replication.
    """
    table = table if table is not None else study_table()
    truth = truth_model(spec)
    alpha = spec.alphas[0]
    alt = make_alternative(spec.alternative, spec.parameters[0])
    result = StudyResult(spec)
    failed = 0
    for o in range(int(spec.outer)):
        root = _cell_seed(spec, o)
        base = simulate_baseline(spec, truth, table, replication_rng(root, 2, 0))
        model = fitted
        if model is None:
            try:
                fit = fit_excess_model(base, table, FitSpec(presets.CUT_POINTS), presets.SCHEMA)
            except RelCusumError as exc:
                log.warning("outer replication %d: fit failed (%s)", o, exc)
                failed += 1
                continue
            if not fit.converged:
                log.warning("outer replication %d: fit did not converge", o)
                failed += 1
                continue
            model = fit.model
        if spec.covariate_mode == "bootstrap":
            setup = _setup(
                spec, alt, BootstrapCovariates(base),
                CensoringSpec(estimate_censoring_rate(base, spec.baseline_years)),
            )
        else:
            setup = _setup(spec, alt)
        W = simulate_max_statistics(setup, model, table, spec.n_cal, root, workers=workers)
        c = upper_quantile(W, alpha)
        # data from the truth with the true covariate law and censoring
        W1 = simulate_max_statistics(
            _setup(spec, alt), model, table, spec.m_eval, root, truth_model=truth,
            stream=EVALUATION_STREAM, workers=workers,
        )
        p = signal_probability(W1, c)
        result.rows.append({"outer": o, "c": c, "achieved": p, "se": binomial_se(p, spec.m_eval)})
        log.info("%s outer %d: c = %.4f achieved = %.4f", spec.name, o, c, p)
    ach = np.array([r["achieved"] for r in result.rows])
    result.summary = {
        "alpha": alpha,
        "completed": len(ach),
        "failed": failed,
        "mean": float(np.mean(ach)) if len(ach) else math.nan,
        "median": float(np.median(ach)) if len(ach) else math.nan,
        "mean_se": float(np.std(ach, ddof=1) / math.sqrt(len(ach))) if len(ach) > 1 else math.nan,
    }
    return result


def run_study(spec: StudySpec, table=None, workers: int = 1) -> StudyResult:
    if spec.kind == "estimation_error":
        return run_estimation_error_study(spec, table, workers)
    return run_signal_table(spec, table, workers)
