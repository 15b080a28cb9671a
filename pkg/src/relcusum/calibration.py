"""Monte Carlo threshold calibration and signal-probability estimation.

The threshold ``c`` is the empirical upper ``alpha`` quantile of the in-control
maximum statistics ``W_j = max Psi_j``. A chart signals iff ``W > c``, so the
same replications serve every threshold.

Seeding
-------
Replication ``j`` of stream ``s`` draws from
``SeedSequence(entropy, spawn_key=(*root_key, s, j))``. Results therefore do
not depend on how replications are split over worker processes, and two calls
with the same seed and stream share their random numbers (common random
numbers across scenarios and thresholds).
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .alternatives import Alternative
from .chart import MonitoringConfig, UpdateScheme, max_statistic, run_chart
from .errors import ValidationError
from .excess_model import ExcessHazardModel
from .lifetable import LifeTable
from .simulate import ArrivalProcess, CensoringSpec, ShiftScenario, simulate_cohort

log = logging.getLogger(__name__)

# stream tags keep calibration and evaluation draws apart under one master seed
CALIBRATION_STREAM = 0
EVALUATION_STREAM = 1


@dataclass(frozen=True)
class MonitoringSetup:
    """Everything needed to simulate and chart one monitoring period.

    ``covariates`` is any source with a ``draw(n, rng)`` method
    (:class:`~relcusum.simulate.ParametricCovariates` or
    :class:`~relcusum.simulate.BootstrapCovariates`).
    """

    arrivals: ArrivalProcess
    covariates: object
    censoring: CensoringSpec
    alternative: Alternative
    horizon: float
    scheme: UpdateScheme = UpdateScheme.CONTINUOUS
    follow_up_cap: float | None = None
    start_year: float = 0.0
    period: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", UpdateScheme.parse(self.scheme))
        if not self.horizon > 0:
            raise ValidationError("horizon must be > 0")

    def monitoring(self, threshold=math.inf) -> MonitoringConfig:
        return MonitoringConfig(self.horizon, threshold, self.scheme, self.follow_up_cap, self.period)


@dataclass(frozen=True)
class CalibrationSpec:
    setup: MonitoringSetup
    alpha: float
    n: int

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.n) < 1:
            raise ValidationError("number of replications must be >= 1")


@dataclass
class CalibrationResult:
    c: float
    W: np.ndarray = field(repr=False)
    alpha: float
    n: int
    se: float
    seed: int | None = None

    def threshold(self, alpha: float) -> float:
        """Threshold for another target from the same replications."""
        return upper_quantile(self.W, alpha)

    def false_signal_rate(self) -> float:
        """In-sample proportion ``W > c`` (at most ``alpha`` by construction)."""
        return float(np.mean(self.W > self.c))


# -- helpers ----------------------------------------------------------------------


def _root(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if seed is None:
        raise ValidationError("a seed is required; ambient entropy is never used")
    return np.random.SeedSequence(int(seed))


def replication_rng(seed, stream: int, j: int) -> np.random.Generator:
    root = _root(seed)
    ss = np.random.SeedSequence(root.entropy, spawn_key=(*root.spawn_key, stream, j))
    return np.random.default_rng(ss)


def upper_quantile(W, alpha: float) -> float:
    """The ``ceil(alpha N)``-th largest value of ``W``."""
    W = np.asarray(W, dtype=float)
    n = len(W)
    if n == 0:
        raise ValidationError("no replications")
    k = max(1, math.ceil(alpha * n - 1e-9))
    return float(np.sort(W)[::-1][min(k, n) - 1])


def quantile_se(W, alpha: float) -> float:
    """Monte Carlo standard error of :func:`upper_quantile` from a +-1 sd order-statistic interval."""
    W = np.sort(np.asarray(W, dtype=float))[::-1]
    n = len(W)
    if n < 2:
        return math.nan
    k = max(1, math.ceil(alpha * n - 1e-9))
    s = math.sqrt(n * alpha * (1 - alpha))
    lo = min(n, max(1, int(math.floor(k - s))))
    hi = min(n, max(1, int(math.ceil(k + s))))
    return float((W[lo - 1] - W[hi - 1]) / 2)


def _one_cohort(setup, model, table, scenario, rng):
    return simulate_cohort(
        setup.arrivals, setup.covariates, model, table, setup.censoring, scenario,
        setup.horizon, rng, start_year=setup.start_year, follow_up_cap=setup.follow_up_cap,
    )


def _replicate(args):
    setup, chart_model, truth_model, table, scenario, seed, stream, js, threshold = args
    cfg = setup.monitoring(threshold)
    out = np.empty((len(js), 2))
    for i, j in enumerate(js):
        cohort = _one_cohort(setup, truth_model, table, scenario, replication_rng(seed, stream, j))
        path = run_chart(cohort, chart_model, table, setup.alternative, cfg)
        out[i, 0] = max_statistic(path) if math.isinf(threshold) else math.nan
        out[i, 1] = path.signal_time if path.signal_time is not None else math.inf
    return out


def _run(setup, chart_model, truth_model, table, scenario, seed, stream, n, workers, threshold=math.inf):
    js = np.arange(int(n))
    workers = max(1, int(workers or 1))
    if workers == 1 or n < 2 * workers:
        return _replicate((setup, chart_model, truth_model, table, scenario, seed, stream, js, threshold))
    chunks = np.array_split(js, min(len(js), 4 * workers))
    jobs = [(setup, chart_model, truth_model, table, scenario, seed, stream, c, threshold) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_replicate, jobs))
    return np.concatenate(parts, axis=0)


def simulate_max_statistics(
    setup: MonitoringSetup,
    model: ExcessHazardModel,
    table: LifeTable,
    n: int,
    seed,
    scenario: ShiftScenario | None = None,
    truth_model: ExcessHazardModel | None = None,
    stream: int = CALIBRATION_STREAM,
    workers: int = 1,
) -> np.ndarray:
    """``W_j = max Psi_j`` for ``n`` simulated monitoring periods.

    Data come from ``truth_model`` (default: ``model``) under ``scenario``;
    the chart always uses ``model``.
    """
    scenario = scenario or ShiftScenario.in_control()
    truth = truth_model if truth_model is not None else model
    return _run(setup, model, truth, table, scenario, seed, stream, n, workers)[:, 0]


# -- public operations ---------------------------------------------------------------


def calibrate_threshold(spec: CalibrationSpec, model, table, seed, workers: int = 1) -> CalibrationResult:
    """Threshold with in-control false-signal probability ``spec.alpha`` over the horizon.

    Examples
    --------
    >>> res = calibrate_threshold(spec, model, table, seed=7)   # doctest: +SKIP
    >>> res.c, res.se                                           # doctest: +SKIP
    """
    n = int(spec.n)
    if n * spec.alpha < 1:
        warnings.warn(
            f"N*alpha = {n * spec.alpha:.3g} < 1: the upper quantile is the sample maximum and poorly estimated",
            RuntimeWarning, stacklevel=2,
        )
    W = simulate_max_statistics(spec.setup, model, table, n, seed, stream=CALIBRATION_STREAM, workers=workers)
    c = upper_quantile(W, spec.alpha)
    log.info("calibrated c = %.4f from %d replications (alpha = %g)", c, n, spec.alpha)
    return CalibrationResult(c, W, spec.alpha, n, quantile_se(W, spec.alpha), seed if isinstance(seed, int) else None)


def signal_probability(W, c) -> float:
    """Fraction of maximum statistics strictly above ``c``."""
    if math.isinf(c):
        return 0.0
    return float(np.mean(np.asarray(W) > c))


def binomial_se(p: float, m: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / m) if m > 0 else math.nan


def achieved_signal_probability(
    c: float,
    scenario: ShiftScenario,
    setup: MonitoringSetup,
    model: ExcessHazardModel,
    table: LifeTable,
    seed,
    m: int,
    truth_model: ExcessHazardModel | None = None,
    workers: int = 1,
) -> float:
    """Proportion of ``m`` charts (built on ``model``) that signal before the horizon."""
    if c is None or not c >= 0:
        raise ValidationError("threshold must be >= 0")
    if math.isinf(c):
        return 0.0
    W = simulate_max_statistics(
        setup, model, table, m, seed, scenario, truth_model, stream=EVALUATION_STREAM, workers=workers
    )
    return signal_probability(W, c)


@dataclass(frozen=True)
class RunLengthSummary:
    """In-control run-length diagnostic at a fixed threshold.

    ``restricted_mean`` is ``E[min(tau, t_m)]``; ``mean_observed`` averages
    ``tau`` over signalling runs only (``nan`` when none signal).
    """

    c: float
    m: int
    signalled: int
    restricted_mean: float
    mean_observed: float


def run_length_diagnostic(c, setup, model, table, seed, m, scenario=None, workers: int = 1) -> RunLengthSummary:
    if not c > 0:
        raise ValidationError("run-length diagnostic needs c > 0")
    scenario = scenario or ShiftScenario.in_control()
    tau = _run(setup, model, model, table, scenario, seed, EVALUATION_STREAM, m, workers, threshold=c)[:, 1]
    hit = np.isfinite(tau)
    return RunLengthSummary(
        float(c), int(m), int(hit.sum()),
        float(np.mean(np.minimum(tau, setup.horizon))),
        float(np.mean(tau[hit])) if hit.any() else math.nan,
    )


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
