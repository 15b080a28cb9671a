"""Synthetic monitoring data: Poisson arrivals, covariates, event times and censoring.

Random draws are consumed in a fixed order that does not depend on the shift
scenario, so cohorts generated with the same generator state under different
scenarios share their random numbers (common random numbers).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .alternatives import Alternative
from .errors import ConfigurationError, ValidationError
from .excess_model import CovariateSchema, CovariateVector, ExcessHazardModel
from .lifetable import SEXES, Demographics, LifeTable
from .records import Cohort

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArrivalProcess:
    rate: float

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValidationError("arrival rate must be >= 0")


@dataclass(frozen=True)
class CensoringSpec:
    rate: float = 0.0

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValidationError("censoring rate must be >= 0")


# -- covariate sources ------------------------------------------------------------


@dataclass(frozen=True)
class TruncatedNormal:
    mean: float
    sd: float
    lower: float
    upper: float

    def draw(self, u):
        """Map uniforms to the truncated normal by inversion."""
        lo = ndtr((self.lower - self.mean) / self.sd)
        hi = ndtr((self.upper - self.mean) / self.sd)
        x = self.mean + self.sd * ndtri(lo + u * (hi - lo))
        return np.clip(x, self.lower, self.upper)


@dataclass(frozen=True)
class ParametricCovariates:
    """Independent categorical covariates plus a truncated-normal entry age.

    ``proportions`` maps each categorical variable of ``schema`` to the
    probabilities of its levels (in schema order). A schema variable named
    ``sex`` is tied to the demographic sex draw (``female_share``).
    """

    schema: CovariateSchema
    proportions: dict
    age: TruncatedNormal
    female_share: float = 0.5

    def __post_init__(self):
        for var in self.schema.variables:
            if var.name == "sex":
                if tuple(var.levels) != SEXES:
                    raise ValidationError("a 'sex' covariate must have levels M F (M reference)")
                continue
            if not var.categorical:
                raise ValidationError(f"parametric source cannot draw numeric covariate {var.name!r}")
            p = np.asarray(self.proportions.get(var.name, ()), dtype=float)
            if len(p) != len(var.levels) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
                raise ValidationError(f"proportions for {var.name!r} must be {len(var.levels)} probabilities summing to 1")

    def draw(self, n: int, rng):
        sex = (rng.random(n) < self.female_share).astype(np.intp)
        age = self.age.draw(rng.random(n))
        blocks = []
        for var in self.schema.variables:
            if var.name == "sex":
                blocks.append(sex[:, None].astype(float))
                continue
            cum = np.cumsum(self.proportions[var.name])
            cum[-1] = 1.0
            level = np.searchsorted(cum, rng.random(n), side="right")
            level = np.minimum(level, len(cum) - 1)
            blocks.append((level[:, None] == np.arange(1, len(cum))[None, :]).astype(float))
        X = np.hstack(blocks) if blocks else np.zeros((n, 0))
        return sex, age, X


@dataclass(frozen=True)
class BootstrapCovariates:
    """Resample ``(sex, age, X)`` jointly, uniformly from a pool of baseline records."""

    pool: Cohort

    def __post_init__(self):
        if len(self.pool) == 0:
            raise ConfigurationError("bootstrap covariate pool is empty")

    def draw(self, n: int, rng):
        idx = rng.integers(0, len(self.pool), size=n)
        return self.pool.sex[idx], self.pool.age[idx], self.pool.X[idx]


def sample_covariates(source, rng, entry_calendar_time: float = 0.0):
    """Draw one individual's ``(Demographics, CovariateVector)``."""
    sex, age, X = source.draw(1, rng)
    return (
        Demographics(SEXES[int(sex[0])], float(age[0]), entry_calendar_time),
        CovariateVector(tuple(X[0])),
    )


# -- shift scenarios ---------------------------------------------------------------


@dataclass(frozen=True)
class ShiftScenario:
    """When the out-of-control excess hazard applies.

    ``kind`` is ``"in_control"``, ``"all_from"`` (every individual switches at
    calendar time ``time``) or ``"new_from"`` (only arrivals after ``time``).
    """

    kind: str = "in_control"
    time: float = math.inf
    alternative: Alternative | None = None

    def __post_init__(self):
        if self.kind not in ("in_control", "all_from", "new_from"):
            raise ValidationError(f"unknown scenario kind {self.kind!r}")
        if self.kind != "in_control":
            if self.alternative is None:
                raise ValidationError("shift scenarios need an alternative")
            if not self.time >= 0:
                raise ValidationError("shift time must be >= 0")

    @classmethod
    def in_control(cls):
        return cls()

    @classmethod
    def all_from(cls, eta, alternative):
        return cls("all_from", float(eta), alternative)

    @classmethod
    def new_from(cls, eta_star, alternative):
        return cls("new_from", float(eta_star), alternative)

    @classmethod
    def parse(cls, text: str, alternative=None) -> "ShiftScenario":
        """``in_control``, ``all_from:<eta>`` or ``new_from:<eta_star>``."""
        text = text.strip()
        if text == "in_control":
            return cls.in_control()
        kind, _, value = text.partition(":")
        if kind not in ("all_from", "new_from") or not value:
            raise ValidationError(f"bad scenario {text!r}; expected in_control, all_from:<eta> or new_from:<eta>")
        return cls(kind, float(value), alternative)

    def label(self) -> str:
        if self.kind == "in_control":
            return "in_control"
        return f"{self.kind}:{self.time:g}"


# -- primitive samplers ------------------------------------------------------------


def sample_arrivals(proc: ArrivalProcess, t_m: float, rng):
    """Sorted arrival times of a homogeneous Poisson process on ``[0, t_m]``."""
    n = rng.poisson(proc.rate * t_m) if proc.rate > 0 else 0
    return np.sort(rng.random(n) * t_m)


class ConstantHazard:
    def __init__(self, rate):
        self.rate = float(rate)

    def cumulative(self, t):
        return self.rate * np.asarray(t, dtype=float)

    def inverse(self, target):
        with np.errstate(divide="ignore"):
            return np.asarray(target, dtype=float) / self.rate


class IndividualExcessHazard:
    """Cumulative excess hazard of one individual, optionally under an alternative."""

    def __init__(self, model: ExcessHazardModel, x, alternative: Alternative | None = None):
        self.model = model
        self.lp = float(model.linear_predictor(x))
        self.alternative = alternative

    def cumulative(self, t):
        if self.alternative is None:
            return self.model.cumulative(t, self.lp)
        return self.alternative.cumulative1(self.model, t, self.lp)

    def inverse(self, target):
        if self.alternative is None:
            return self.model.inverse(target, self.lp)
        return self.alternative.inverse1(self.model, target, self.lp)


class IndividualPopulationHazard:
    """Cumulative population hazard of one individual, walked up to ``horizon``."""

    def __init__(self, table: LifeTable, z: Demographics, horizon: float):
        from .lifetable import sex_code

        self.table = table
        self.args = (sex_code(z.sex), z.age_at_entry, z.entry_calendar_time)
        self.horizon = horizon

    def cumulative(self, t):
        return self.table.cumulative(*self.args, t)

    def inverse(self, target):
        return self.table.sample_time(*self.args, target, self.horizon)


def sample_event_time(hazard, rng=None, e=None) -> float:
    """Inverse-transform draw: ``inf{t : H(t) >= E}`` with ``E ~ Exp(1)``.

    ``hazard`` needs an ``inverse`` method (closed form for the classes above).
    Pass ``e`` to invert a given unit-exponential value. Returns ``inf`` when
    the cumulative hazard never reaches ``E`` within its support.
    """
    if e is None:
        e = rng.standard_exponential()
    return float(hazard.inverse(np.asarray(float(e))))


# -- scenario splicing ---------------------------------------------------------------


def spliced_cumulative(model, alt, t, switch, lp):
    """Cumulative excess hazard with the switch to ``alt`` at follow-up time ``switch``."""
    t = np.asarray(t, dtype=float)
    s = np.minimum(switch, t)
    after = np.maximum(t, s)
    h_before = model.cumulative(s, lp)
    return np.where(t <= switch, model.cumulative(np.minimum(t, switch), lp),
                    h_before + alt.cumulative1(model, after, lp) - alt.cumulative1(model, s, lp))


def _excess_times(model, scenario: ShiftScenario, e, lp, arrival, horizon):
    if scenario.kind == "in_control":
        return model.inverse(e, lp)
    alt = scenario.alternative
    if scenario.kind == "new_from":
        out = model.inverse(e, lp)
        late = arrival > scenario.time
        if np.any(late):
            out[late] = alt.inverse1(model, e[late], lp[late])
        return out
    # all_from: hazard switches at follow-up time max(0, eta - B)
    switch = np.minimum(np.maximum(scenario.time - arrival, 0.0), horizon)
    switch = np.minimum(switch, model.support_end)
    out = model.inverse(e, lp)
    h_switch = model.cumulative(switch, lp)
    late = e > h_switch
    if np.any(late):
        lp_l, sw_l = lp[late], switch[late]
        target = e[late] - h_switch[late] + alt.cumulative1(model, sw_l, lp_l)
        out[late] = np.maximum(alt.inverse1(model, target, lp_l), sw_l)
    return out


def simulate_cohort(
    proc: ArrivalProcess,
    source,
    model: ExcessHazardModel,
    table: LifeTable,
    censoring: CensoringSpec,
    scenario: ShiftScenario,
    t_m: float,
    rng,
    start_year: float = 0.0,
    follow_up_cap: float | None = None,
) -> Cohort:
    """One synthetic monitoring data set on ``[0, t_m]``.

    Each arrival gets covariates from ``source``, an excess event time by
    inverting the (possibly spliced) cumulative excess hazard, a population
    event time from ``table`` and censoring ``min(Exp(rate), t_m - B)``.
    Calendar entry time is ``start_year + B``.
    """
    b = sample_arrivals(proc, t_m, rng)
    n = len(b)
    sex, age, X = source.draw(n, rng)
    e_excess = rng.standard_exponential(n)
    e_pop = rng.standard_exponential(n)
    e_cens = rng.standard_exponential(n)
    if n == 0:
        return Cohort.empty(X.shape[1] if X.ndim == 2 else 0)

    admin = t_m - b
    if follow_up_cap is not None:
        admin = np.minimum(admin, follow_up_cap)
    with np.errstate(divide="ignore"):
        c = np.minimum(e_cens / censoring.rate, admin) if censoring.rate > 0 else admin.copy()

    lp = model.linear_predictor(X)
    t_e = _excess_times(model, scenario, e_excess, lp, b, admin)
    beyond = np.isinf(t_e) & (c > model.support_end)
    if np.any(beyond):
        log.warning(
            "%d excess event time(s) fall beyond the model support %.4g; censoring them there",
            int(beyond.sum()), model.support_end,
        )
        c = np.where(beyond, model.support_end, c)
    t_p = table.sample_time(sex, age, start_year + b, e_pop, c)

    t = np.minimum(t_e, t_p)
    event = t <= c
    follow_up = np.where(event, t, c)
    return Cohort(b, sex, age, start_year + b, X, follow_up, event)
