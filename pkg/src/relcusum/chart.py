"""Continuous-time CUSUM for excess hazards: ``R(t)``, ``Psi(t)`` and the signal time.

Every individual contributes to the log-likelihood ratio ``R`` through

* a lump at its inclusion time (the drift accumulated before the chart could see it),
* a jump at its effective event time (the event term), and
* for the continuous-type schemes, a drift ``-(H1(a) - H0(a))`` while at risk.

The population hazard cancels from the drift, so for a piecewise-constant
baseline every drift is piecewise linear with knots shared by all individuals.
``R`` is then piecewise linear between a finite set of breakpoints and the
chart is computed exactly by sorting slope changes and jumps. Weibull
baselines give curved but monotone segments (each individual's drift has the
sign fixed by the alternative), handled by direct evaluation at breakpoints and
root-finding for the crossing.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .alternatives import Alternative
from .errors import ConfigurationError, ValidationError
from .excess_model import ExcessHazardModel, PiecewiseBaseline
from .lifetable import LifeTable
from .records import Cohort, PatientRecord


class UpdateScheme(enum.Enum):
    CONTINUOUS = "continuous"
    AT_EVENT = "at_event"
    PERIODIC_ARRIVAL = "periodic_arrival"
    PERIODIC_AT_EVENT = "periodic_at_event"

    @classmethod
    def parse(cls, value) -> "UpdateScheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise ValidationError(f"unknown updating scheme {value!r}; expected one of {[m.value for m in cls]}")

    @property
    def continuous_drift(self) -> bool:
        return self in (UpdateScheme.CONTINUOUS, UpdateScheme.PERIODIC_ARRIVAL)


@dataclass(frozen=True)
class MonitoringConfig:
    horizon: float
    threshold: float = math.inf
    scheme: UpdateScheme = UpdateScheme.CONTINUOUS
    follow_up_cap: float | None = None
    period: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", UpdateScheme.parse(self.scheme))
        if not self.horizon > 0:
            raise ValidationError("monitoring horizon must be > 0")
        if not self.threshold > 0:
            raise ValidationError("threshold must be > 0")
        if self.follow_up_cap is not None and not self.follow_up_cap > 0:
            raise ValidationError("follow-up cap must be > 0")
        if not self.period > 0:
            raise ValidationError("period must be > 0")


def _period_ceil(x, period):
    return period * np.ceil(np.asarray(x, dtype=float) / period)


def at_risk_time(scheme, record: PatientRecord, t: float, follow_up_cap=None, period: float = 1.0):
    """Time at risk ``A_i(t)`` and event indicator ``delta_i(t)`` at chart time ``t``."""
    scheme = UpdateScheme.parse(scheme)
    b, f, ev = record.arrival, record.follow_up, record.event
    if follow_up_cap is not None and f > follow_up_cap:
        f, ev = follow_up_cap, False
    if scheme is UpdateScheme.CONTINUOUS:
        if t < b:
            return 0.0, 0
        a = min(f, max(t - b, 0.0))
        return a, int(ev and t - b >= f)
    if scheme is UpdateScheme.AT_EVENT:
        seen = f + b <= t
        return (f if seen else 0.0), int(ev and seen)
    if scheme is UpdateScheme.PERIODIC_ARRIVAL:
        if float(_period_ceil(b, period)) > t:
            return 0.0, 0
        a = min(f, t - b)
        return a, int(ev and t - b >= f)
    seen = float(_period_ceil(f + b, period)) <= t
    return (f if seen else 0.0), int(ev and seen)


@dataclass
class ChartPath:
    """Exact chart trajectory sampled at its breakpoints.

    ``R`` holds right-continuous values at ``times``; ``R_left`` the limits from
    the left (they differ where a jump lands). ``slopes[g]`` is the drift rate of
    ``R`` on ``(times[g], times[g+1])`` (NaN for curved segments).
    """

    times: np.ndarray
    R: np.ndarray
    R_left: np.ndarray
    running_min: np.ndarray
    slopes: np.ndarray
    event_flag: np.ndarray
    threshold: float
    horizon: float
    signal_time: float | None = None
    _evaluator: object = field(default=None, repr=False)

    @property
    def psi(self):
        return self.R - self.running_min

    @property
    def signalled(self) -> bool:
        return self.signal_time is not None

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def R_at(self, t):
        """``R`` at arbitrary chart times within the path."""
        t = np.asarray(t, dtype=float)
        if self._evaluator is not None:
            return self._evaluator(t)
        g = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        return self.R[g] + self.slopes[g] * (t - self.times[g])

    def psi_at(self, t):
        t = np.asarray(t, dtype=float)
        g = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        r = self.R_at(t)
        # segments are monotone, so the running minimum is the smaller of its value at the
        # segment start and the current value
        return r - np.minimum(self.running_min[g], r)


def max_statistic(path: ChartPath) -> float:
    """Supremum of ``Psi`` over the path (attained at a breakpoint or just before a jump)."""
    prev_min = np.concatenate([[np.inf], path.running_min[:-1]])
    left = path.R_left - np.minimum(prev_min, path.R_left)
    left[0] = 0.0
    return float(max(np.max(path.psi), np.max(left)))


# -- engine -------------------------------------------------------------------------


def _as_cohort(records) -> Cohort:
    if isinstance(records, Cohort):
        return records
    return Cohort.from_records(records)


def _schedule(cohort: Cohort, scheme: UpdateScheme, horizon: float, period: float):
    """Inclusion time, at-risk time at inclusion, drift end and effective event time per record."""
    b, f = cohort.arrival, cohort.follow_up
    if scheme is UpdateScheme.CONTINUOUS:
        incl, a0, t_event = b, np.zeros_like(b), b + f
    elif scheme is UpdateScheme.PERIODIC_ARRIVAL:
        incl = _period_ceil(b, period)
        a0 = np.minimum(f, incl - b)
        t_event = np.maximum(incl, b + f)
    elif scheme is UpdateScheme.AT_EVENT:
        incl, a0 = b + f, f
        t_event = incl
    else:
        incl, a0 = _period_ceil(b + f, period), f
        t_event = incl
    included = incl <= horizon
    if scheme.continuous_drift:
        a_end = np.maximum(np.minimum(f, horizon - b), a0)
    else:
        a_end = a0
    return incl, a0, a_end, t_event, included


def _validate_support(alt, model, a_max):
    need = alt.required_support(a_max)
    if need > model.support_end * (1 + 1e-12):
        hint = ""
        if isinstance(model.baseline, PiecewiseBaseline):
            hint = f"; extend the last band, e.g. model.extended_to({need:g})"
        raise ConfigurationError(
            f"{alt.describe()} chart needs the in-control baseline up to t = {need:g} "
            f"but its support ends at {model.support_end:g}{hint}"
        )


def _chunked_sum(fn, times, chunk_elems, width):
    out = np.empty(len(times))
    step = max(1, chunk_elems // max(width, 1))
    for s in range(0, len(times), step):
        out[s:s + step] = fn(times[s:s + step])
    return out


def run_chart(records, model: ExcessHazardModel, table: LifeTable, alt: Alternative, config: MonitoringConfig) -> ChartPath:
    """Compute the chart path on ``[0, min(horizon, tau)]``.

    ``records`` is a list of :class:`PatientRecord` or a :class:`Cohort`; order
    does not matter.
    """
    cohort = _as_cohort(records).capped(config.follow_up_cap)
    t_m = float(config.horizon)
    incl, a0, a_end, t_event, included = _schedule(cohort, config.scheme, t_m, config.period)

    counted = cohort.event & included & (t_event <= t_m)
    if np.any(included):
        a_max = float(np.max(np.where(counted, cohort.follow_up, np.where(included, a_end, 0.0))))
        a_max = max(a_max, float(np.max(np.where(included, a0, 0.0))))
        _validate_support(alt, model, a_max)

    lp = model.linear_predictor(cohort.X) if len(cohort) else np.zeros(0)

    # jumps: event terms and inclusion lumps
    ev_idx = np.flatnonzero(counted)
    fu_ev = cohort.follow_up[ev_idx]
    hp = table.hazard(cohort.sex[ev_idx], cohort.age[ev_idx] + fu_ev, cohort.entry_year[ev_idx] + fu_ev)
    ev_terms = alt.event_term(model, fu_ev, lp[ev_idx], hp)

    lump_idx = np.flatnonzero(included & (a0 > 0))
    lumps = alt.drift(model, a0[lump_idx], lp[lump_idx])

    drift_idx = np.flatnonzero(included & (a_end > a0))
    piecewise = isinstance(model.baseline, PiecewiseBaseline)

    times = [np.array([0.0, t_m]), t_event[ev_idx], incl[lump_idx]]
    jumps = [np.zeros(2), ev_terms, lumps]
    dslope = [np.zeros(2), np.zeros(len(ev_idx)), np.zeros(len(lump_idx))]
    is_event = [np.zeros(2, bool), np.ones(len(ev_idx), bool), np.zeros(len(lump_idx), bool)]

    b_d, a0_d, ae_d, lp_d = cohort.arrival[drift_idx], a0[drift_idx], a_end[drift_idx], lp[drift_idx]
    if piecewise:
        knots = alt.drift_knots(model)
        mids = 0.5 * (knots[:-1] + knots[1:])
        # slopes[i, j]: drift rate of individual i on knot interval j
        S = -(alt.hazard1(model, mids[None, :], lp_d[:, None]) - model.hazard(mids[None, :], lp_d[:, None]))
        j0 = np.clip(np.searchsorted(knots, a0_d, side="right") - 1, 0, len(mids) - 1)
        j1 = np.clip(np.searchsorted(knots, ae_d, side="left") - 1, 0, len(mids) - 1)
        rows = np.arange(len(drift_idx))
        times += [b_d + a0_d, b_d + ae_d]
        dslope += [S[rows, j0], -S[rows, j1]]
        inner = (knots[None, 1:-1] > a0_d[:, None]) & (knots[None, 1:-1] < ae_d[:, None])
        ii, jj = np.nonzero(inner)
        times.append(b_d[ii] + knots[1:-1][jj])
        dslope.append(S[ii, jj + 1] - S[ii, jj])
        n_new = 2 * len(drift_idx) + len(ii)
    else:
        times += [b_d + a0_d, b_d + ae_d]
        dslope += [np.zeros(len(drift_idx))] * 2
        n_new = 2 * len(drift_idx)
    jumps.append(np.zeros(n_new))
    is_event.append(np.zeros(n_new, bool))

    times = np.concatenate(times)
    jumps = np.concatenate(jumps)
    dslope = np.concatenate(dslope)
    is_event = np.concatenate(is_event)
    keep = times <= t_m
    times, jumps, dslope, is_event = times[keep], jumps[keep], dslope[keep], is_event[keep]

    order = np.lexsort((dslope, jumps, times))
    times, jumps, dslope, is_event = times[order], jumps[order], dslope[order], is_event[order]
    new = np.empty(len(times), dtype=bool)
    new[0] = True
    new[1:] = times[1:] != times[:-1]
    starts = np.flatnonzero(new)
    T = times[starts]
    J = np.add.reduceat(jumps, starts)
    E = np.add.reduceat(is_event.astype(np.intp), starts) > 0

    evaluator = None
    if piecewise:
        slopes = np.cumsum(np.add.reduceat(dslope, starts))
        incr = J.copy()
        incr[1:] += slopes[:-1] * np.diff(T)
        R = np.cumsum(incr)
        R_left = R - J
    else:
        slopes = np.full(len(T), np.nan)
        base0 = alt.drift(model, a0_d, lp_d)

        def cont(t):
            t = np.asarray(t, dtype=float)
            flat = t.reshape(-1)
            a = np.clip(flat[:, None] - b_d[None, :], a0_d[None, :], ae_d[None, :])
            val = np.sum(alt.drift(model, a, lp_d[None, :]) - base0[None, :], axis=1)
            return val.reshape(t.shape)

        cumJ = np.cumsum(J)
        C = _chunked_sum(cont, T, 2_000_000, len(drift_idx))
        R = cumJ + C
        R_left = R - J

        def evaluator(t):
            t = np.asarray(t, dtype=float)
            g = np.clip(np.searchsorted(T, t, side="right") - 1, 0, len(T) - 1)
            return cumJ[g] + _chunked_sum(cont, t.reshape(-1), 2_000_000, len(drift_idx)).reshape(t.shape)

    G = len(T)
    seq = np.empty(2 * G - 1)
    seq[0] = R[0]
    seq[1::2] = R_left[1:]
    seq[2::2] = R[1:]
    runmin_seq = np.minimum.accumulate(seq)
    psi_seq = seq - runmin_seq
    running_min = runmin_seq[0::2]

    signal_time = None
    c = config.threshold
    over = np.flatnonzero(psi_seq > c) if math.isfinite(c) else np.empty(0, dtype=np.intp)
    if len(over):
        k = int(over[0])
        if k % 2 == 0:
            # crossing by a jump (or already above at t = 0)
            g = k // 2
            signal_time = float(T[g])
            cut = g + 1
            T, R, R_left, running_min, slopes, E = T[:cut], R[:cut], R_left[:cut], running_min[:cut], slopes[:cut], E[:cut]
        else:
            # crossing inside the segment (T[g-1], T[g])
            g = (k + 1) // 2
            floor_ = running_min[g - 1]
            psi0 = R[g - 1] - floor_
            if piecewise:
                tau = T[g - 1] + (c - psi0) / slopes[g - 1]
                tau = min(max(tau, T[g - 1]), T[g])
            else:
                f = lambda t: cumJ[g - 1] + float(cont(np.array([t]))[0]) - floor_ - c  # noqa: E731
                fa, fb = f(T[g - 1]), f(T[g])
                if fa >= 0:
                    tau = T[g - 1]
                elif fb <= 0:
                    # crossing decided by rounding in the breakpoint values
                    tau = T[g]
                else:
                    tau = brentq(f, T[g - 1], T[g], xtol=1e-14, rtol=4 * np.finfo(float).eps)
            signal_time = float(tau)
            r_tau = R[g - 1] + c - psi0 if piecewise else floor_ + c
            T = np.append(T[:g], tau)
            R = np.append(R[:g], r_tau)
            R_left = np.append(R_left[:g], r_tau)
            running_min = np.append(running_min[:g], floor_)
            slopes = np.append(slopes[:g], slopes[g - 1])
            E = np.append(E[:g], False)

    return ChartPath(
        times=T, R=R, R_left=R_left, running_min=running_min, slopes=slopes, event_flag=E,
        threshold=c, horizon=t_m, signal_time=signal_time, _evaluator=evaluator,
    )


def write_path_csv(path: ChartPath, path_or_stream) -> None:
    """Plot-ready ``time,R,Psi,event_flag`` rows at every breakpoint."""
    close = False
    if isinstance(path_or_stream, (str, os.PathLike)):
        stream = open(path_or_stream, "w", newline="", encoding="utf-8")
        close = True
    else:
        stream = path_or_stream
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["time", "R", "Psi", "event_flag"])
        for t, r, p, e in zip(path.times, path.R, path.psi, path.event_flag):
            w.writerow([repr(float(t)), repr(float(r)), repr(float(max(p, 0.0))), int(e)])
    finally:
        if close:
            stream.close()
