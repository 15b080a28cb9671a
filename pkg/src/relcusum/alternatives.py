"""Out-of-control excess hazard alternatives and their log-likelihood-ratio terms.

Three shift families are supported:

* :class:`Proportional` -- ``h1 = rho * h0``
* :class:`Additive` -- ``h1 = max(0, h0 + gamma)``
* :class:`AcceleratedTime` -- ``H1(u) = H0(k u)``, i.e. ``h1(u) = k h0(k u)``

Each class works on arrays of follow-up times ``t`` and linear predictors
``lp`` (broadcast together). All cumulative quantities are closed form; the
additive truncation point is located per band for piecewise baselines and by a
single closed-form root for Weibull baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModelInconsistencyError, SupportError, ValidationError
from .excess_model import ExcessHazardModel, PiecewiseBaseline, WeibullBaseline
from .lifetable import LifeTable, population_hazard


def _bisect_inverse(fn, target, hi, iters=200):
    """Vectorised bisection for increasing ``fn``: smallest ``t`` in ``[0, hi]`` with ``fn(t) >= target``."""
    lo = np.zeros_like(target)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        up = fn(mid) >= target
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(1.0, hi)):
            break
    return hi


class Alternative:
    """Common interface. Subclasses implement ``hazard1``, ``cumulative1`` and ``inverse1``."""

    kind: str = ""

    @property
    def is_identity(self) -> bool:
        raise NotImplementedError

    @property
    def parameter(self) -> float:
        raise NotImplementedError

    def required_support(self, a_max: float) -> float:
        """Largest baseline time needed to evaluate the alternative up to at-risk time ``a_max``."""
        return a_max

    def hazard1(self, model: ExcessHazardModel, t, lp):
        raise NotImplementedError

    def cumulative1(self, model: ExcessHazardModel, t, lp):
        raise NotImplementedError

    def inverse1(self, model: ExcessHazardModel, target, lp):
        """Smallest ``t`` with ``H1(t) >= target``; ``inf`` if never reached within support."""
        raise NotImplementedError

    def drift_knots(self, model: ExcessHazardModel):
        """At-risk times where the drift rate may change (piecewise baselines only)."""
        return np.asarray(model.baseline.knots(), dtype=float)

    # -- likelihood-ratio pieces --------------------------------------------

    def event_term(self, model, t, lp, hp):
        """``log((hP + h1(t)) / (hP + h0(t)))`` element-wise."""
        h0 = model.hazard(t, lp)
        h1 = self.hazard1(model, t, lp)
        den = hp + h0
        if np.any(den <= 0):
            raise ModelInconsistencyError("in-control total hazard is 0 at an observed event time")
        with np.errstate(divide="ignore"):
            return np.log((hp + h1) / den)

    def drift(self, model, a, lp):
        """``-(H1(a) - H0(a))`` element-wise: the compensator part of the log-likelihood ratio."""
        return -(self.cumulative1(model, a, lp) - model.cumulative(a, lp))

    def describe(self) -> str:
        return f"{self.kind}({self.parameter:g})"


@dataclass(frozen=True)
class Proportional(Alternative):
    rho: float
    kind = "proportional"

    def __post_init__(self):
        if not self.rho > 0:
            raise ValidationError(f"rho must be > 0, got {self.rho}")

    @property
    def is_identity(self):
        return self.rho == 1.0

    @property
    def parameter(self):
        return self.rho

    def hazard1(self, model, t, lp):
        return self.rho * model.hazard(t, lp)

    def cumulative1(self, model, t, lp):
        return self.rho * model.cumulative(t, lp)

    def inverse1(self, model, target, lp):
        return model.inverse(np.asarray(target) / self.rho, lp)

    def drift(self, model, a, lp):
        return -(self.rho - 1.0) * model.cumulative(a, lp)


@dataclass(frozen=True)
class Additive(Alternative):
    gamma: float
    kind = "additive"

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ValidationError("gamma must be finite")

    @property
    def is_identity(self):
        return self.gamma == 0.0

    @property
    def parameter(self):
        return self.gamma

    def hazard1(self, model, t, lp):
        return np.maximum(0.0, model.hazard(t, lp) + self.gamma)

    # For gamma >= 0 no truncation happens and H1 = H0 + gamma t.

    def _piecewise_levels(self, model, lp):
        b = model.baseline
        return np.maximum(0.0, b.levels * np.exp(np.asarray(lp, dtype=float))[..., None] + self.gamma)

    def _weibull_crossing(self, model, lp):
        """Follow-up time where ``h0 exp(lp) + gamma`` changes sign (gamma < 0)."""
        b = model.baseline
        a, sc = b.shape, b.scale
        s = np.exp(lp)
        if a == 1.0:
            # constant hazard: all-or-nothing
            return np.where(sc * s + self.gamma > 0, np.inf, 0.0)
        with np.errstate(over="ignore", divide="ignore"):
            return (-self.gamma / (a * sc * s)) ** (1.0 / (a - 1.0))

    def cumulative1(self, model, t, lp):
        t = np.asarray(t, dtype=float)
        lp = np.asarray(lp, dtype=float)
        if self.gamma >= 0:
            return model.cumulative(t, lp) + self.gamma * t
        b = model.baseline
        if isinstance(b, PiecewiseBaseline):
            b._check(t)
            t, lp = np.broadcast_arrays(t, lp)
            levels = self._piecewise_levels(model, lp)
            cuts = b.cut_points
            overlap = np.clip(np.minimum(t[..., None], cuts[1:]) - cuts[:-1], 0.0, None)
            return np.sum(levels * overlap, axis=-1)
        if isinstance(b, WeibullBaseline):
            t, lp = np.broadcast_arrays(t, lp)
            u = self._weibull_crossing(model, lp)
            s = np.exp(lp)
            if b.shape <= 1.0:
                # decreasing hazard: positive part before the crossing
                m = np.minimum(t, u)
                return s * b.cumulative(m) + self.gamma * m
            # increasing hazard: positive part after the crossing
            m = np.maximum(t, u)
            return np.where(t > u, s * (b.cumulative(m) - b.cumulative(u)) + self.gamma * (m - u), 0.0)
        raise ValidationError(f"unsupported baseline {b!r}")

    def inverse1(self, model, target, lp):
        target, lp = np.broadcast_arrays(np.asarray(target, dtype=float), np.asarray(lp, dtype=float))
        b = model.baseline
        if isinstance(b, PiecewiseBaseline):
            s = np.exp(lp)
            levels = np.maximum(0.0, b.levels * s[..., None] + self.gamma)
            widths = np.diff(b.cut_points)
            cum = np.concatenate([np.zeros(target.shape + (1,)), np.cumsum(levels * widths, axis=-1)], axis=-1)
            k = np.sum(cum[..., 1:] < target[..., None], axis=-1)
            beyond = k >= b.n_bands
            kk = np.minimum(k, b.n_bands - 1)
            lev = np.take_along_axis(levels, kk[..., None], -1)[..., 0]
            base = np.take_along_axis(cum, kk[..., None], -1)[..., 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = b.cut_points[kk] + (target - base) / lev
            t = np.where(target <= 0, 0.0, t)
            return np.where(beyond, np.inf, np.minimum(t, b.cut_points[kk + 1]))
        if isinstance(b, WeibullBaseline):
            fn = lambda t: self.cumulative1(model, t, lp)  # noqa: E731
            out = np.full(target.shape, np.inf)
            if self.gamma >= 0:
                # H1 >= H0, so the in-control inverse brackets the root
                hi = model.inverse(target, lp)
                return np.where(target <= 0, 0.0, _bisect_inverse(fn, target, hi))
            u = self._weibull_crossing(model, lp)
            if b.shape <= 1.0:
                # the crossing can overflow to inf when gamma is tiny
                with np.errstate(invalid="ignore"):
                    top = np.where(np.isinf(u), np.inf, self.cumulative1(model, np.where(np.isinf(u), 0.0, u), lp))
                ok = target <= top
                if np.any(ok):
                    # H1 <= H0, so double up from the in-control inverse; the
                    # crossing itself can be astronomically far when gamma is tiny
                    tk, lk, uk = target[ok], lp[ok], u[ok]
                    hi = np.minimum(np.maximum(model.inverse(tk, lk), 1e-300), uk)
                    for _ in range(2000):
                        short = (self.cumulative1(model, hi, lk) < tk) & (hi < uk)
                        if not np.any(short):
                            break
                        hi = np.where(short, np.minimum(2 * hi, uk), hi)
                    out[ok] = _bisect_inverse(
                        lambda t: self.cumulative1(model, t, lp[ok]), target[ok], hi
                    )
                return np.where(target <= 0, 0.0, out)
            # increasing hazard: zero until u, then grows without bound
            hi = np.maximum(u, 1.0)
            while True:
                short = fn(hi) < target
                if not np.any(short):
                    break
                hi = np.where(short, 2 * hi, hi)
            return np.where(target <= 0, 0.0, _bisect_inverse(fn, target, hi))
        raise ValidationError(f"unsupported baseline {b!r}")


@dataclass(frozen=True)
class AcceleratedTime(Alternative):
    k: float
    kind = "accelerated"

    def __post_init__(self):
        if not self.k > 0:
            raise ValidationError(f"k must be > 0, got {self.k}")

    @property
    def is_identity(self):
        return self.k == 1.0

    @property
    def parameter(self):
        return self.k

    def required_support(self, a_max):
        return max(a_max, self.k * a_max)

    def hazard1(self, model, t, lp):
        return self.k * model.hazard(self.k * np.asarray(t, dtype=float), lp)

    def cumulative1(self, model, t, lp):
        return model.cumulative(self.k * np.asarray(t, dtype=float), lp)

    def inverse1(self, model, target, lp):
        return model.inverse(target, lp) / self.k

    def drift_knots(self, model):
        cuts = np.asarray(model.baseline.knots(), dtype=float)
        end = min(cuts[-1], cuts[-1] / self.k)
        knots = np.union1d(cuts, cuts / self.k)
        return knots[knots <= end]


def make_alternative(kind: str, value: float) -> Alternative:
    """Build an alternative from a config-style ``kind`` and its parameter."""
    kind = kind.strip().lower()
    if kind in ("proportional", "rho"):
        return Proportional(float(value))
    if kind in ("additive", "gamma"):
        return Additive(float(value))
    if kind in ("accelerated", "accelerated_time", "k"):
        return AcceleratedTime(float(value))
    raise ValidationError(f"unknown alternative {kind!r}; expected proportional, additive or accelerated")


# -- scalar API -----------------------------------------------------------------


def _lp(model, x):
    return model.linear_predictor(x)


def out_of_control_excess_hazard(alt: Alternative, model: ExcessHazardModel, x, t: float) -> float:
    return float(alt.hazard1(model, t, _lp(model, x)))


def out_of_control_cumulative(alt: Alternative, model: ExcessHazardModel, x, t: float) -> float:
    return float(alt.cumulative1(model, t, _lp(model, x)))


def llr_event_term(alt: Alternative, model: ExcessHazardModel, table: LifeTable, z, x, t_event: float) -> float:
    """Jump of the log-likelihood ratio when individual ``(z, x)`` has an event at follow-up ``t_event``."""
    hp = population_hazard(table, z, t_event)
    if alt.required_support(t_event) > model.support_end:
        raise SupportError(f"alternative needs the baseline up to {alt.required_support(t_event):g}")
    return float(alt.event_term(model, t_event, _lp(model, x), hp))


def llr_drift_term(alt: Alternative, model: ExcessHazardModel, z, x, a: float) -> float:
    """Compensator contribution ``-(H1(a) - H0(a))`` after at-risk time ``a``."""
    if a < 0:
        raise SupportError("at-risk time must be >= 0")
    return float(alt.drift(model, a, _lp(model, x)))
