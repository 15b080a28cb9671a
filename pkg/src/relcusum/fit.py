"""Maximum likelihood for the proportional excess hazard model with a piecewise baseline.

The individual-level log-likelihood with known population hazard is

    l(beta, chi) = sum_i [d_i log(hP_i(T_i) + exp(chi_k(i) + x_i beta))
                          - HP_i(T_i) - exp(x_i beta) sum_k exp(chi_k) E_ik]

where ``E_ik`` is the exposure of individual ``i`` in band ``k``. It is not
concave in general (the event term is convex in the linear predictor), so the
optimiser is a Levenberg-damped Newton method with a monotone acceptance rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError
from .excess_model import CovariateSchema, ExcessHazardModel, PiecewiseBaseline
from .lifetable import LifeTable
from .records import Cohort

log = logging.getLogger(__name__)

CHI_FLOOR = -20.0
DEFAULT_CUT_POINTS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0)


@dataclass(frozen=True)
class FitSpec:
    cut_points: tuple = DEFAULT_CUT_POINTS
    tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cut_points)
        if len(cuts) < 2 or cuts[0] != 0.0 or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValidationError("cut points must start at 0 and increase strictly")
        object.__setattr__(self, "cut_points", cuts)
        if not self.tol > 0 or int(self.max_iter) < 1:
            raise ValidationError("tol must be > 0 and max_iter >= 1")


@dataclass
class FitResult:
    model: ExcessHazardModel
    loglik: float
    grad_norm: float
    converged: bool
    iterations: int
    se: np.ndarray = field(repr=False)
    flags: tuple = ()
    trace: list = field(default_factory=list, repr=False)

    @property
    def beta(self):
        return self.model.coefficients

    @property
    def chi(self):
        return self.model.baseline.log_levels


class _Design:
    """Sufficient quantities of a cohort for one set of cut points."""

    def __init__(self, cohort: Cohort, table: LifeTable, cut_points):
        cuts = np.asarray(cut_points, dtype=float)
        self.cuts = cuts
        end = cuts[-1]
        f = np.minimum(cohort.follow_up, end)
        event = cohort.event & (cohort.follow_up < end)
        self.X = cohort.X
        self.p = self.X.shape[1]
        self.K = len(cuts) - 1
        self.E = np.clip(np.minimum(f[:, None], cuts[None, 1:]) - cuts[None, :-1], 0.0, None)
        self.event = event
        # right-continuous bands: an event exactly at a cut belongs to the later band
        self.band = np.clip(np.searchsorted(cuts, f, side="right") - 1, 0, self.K - 1)
        self.HP = table.cumulative(cohort.sex, cohort.age, cohort.entry_year, f) if len(f) else np.zeros(0)
        ev = np.flatnonzero(event)
        self.ev = ev
        self.hp_ev = table.hazard(cohort.sex[ev], cohort.age[ev] + f[ev], cohort.entry_year[ev] + f[ev])
        self.n_events = len(ev)
        self.exposure = self.E.sum(axis=0)

    def split(self, theta):
        return theta[: self.p], theta[self.p:]

    def loglik(self, theta, with_hp=True):
        beta, chi = self.split(theta)
        xb = self.X @ beta if self.p else np.zeros(len(self.E))
        # trial points far from the optimum may overflow; they score -inf
        with np.errstate(over="ignore", invalid="ignore"):
            mu_ev = np.exp(xb[self.ev] + chi[self.band[self.ev]])
            tot = self.hp_ev + mu_ev
            if np.any(tot <= 0):
                return -math.inf
            cum = np.exp(xb) * (self.E @ np.exp(chi))
            ll = float(np.sum(np.log(tot)) - np.sum(cum))
        if math.isnan(ll):
            return -math.inf
        return ll - float(np.sum(self.HP)) if with_hp else ll

    def derivatives(self, theta):
        """Log-likelihood (without the constant population part), gradient and Hessian."""
        beta, chi = self.split(theta)
        p, K = self.p, self.K
        xb = self.X @ beta if p else np.zeros(len(self.E))
        m = np.exp(xb)[:, None] * self.E * np.exp(chi)[None, :]   # n x K
        mi = m.sum(axis=1)
        Xe = self.X[self.ev]
        be = self.band[self.ev]
        mu = np.exp(xb[self.ev] + chi[be])
        tot = self.hp_ev + mu
        w = mu / tot
        ll = float(np.sum(np.log(tot)) - mi.sum())

        g = np.empty(p + K)
        g[:p] = Xe.T @ w - self.X.T @ mi
        g[p:] = np.bincount(be, weights=w, minlength=K) - m.sum(axis=0)

        v = w * (1.0 - w)
        H = np.zeros((p + K, p + K))
        # event part (convex in the linear predictor)
        H[:p, :p] += (Xe * v[:, None]).T @ Xe
        Bv = np.zeros((K, p))
        np.add.at(Bv, be, Xe * v[:, None])
        H[p:, :p] += Bv
        H[:p, p:] += Bv.T
        H[p:, p:] += np.diag(np.bincount(be, weights=v, minlength=K))
        # cumulative part
        H[:p, :p] -= (self.X * mi[:, None]).T @ self.X
        C = m.T @ self.X                                             # K x p
        H[p:, :p] -= C
        H[:p, p:] -= C.T
        H[p:, p:] -= np.diag(m.sum(axis=0))
        return ll, g, H


def _cohort(records) -> Cohort:
    return records if isinstance(records, Cohort) else Cohort.from_records(records)


def log_likelihood(records, model: ExcessHazardModel, table: LifeTable) -> float:
    """Full log-likelihood (including the population part) of an in-control candidate.

    Follow-up beyond the last cut point is censored there. Returns ``-inf`` when
    the total hazard vanishes at an observed event.
    """
    if not isinstance(model.baseline, PiecewiseBaseline):
        raise ValidationError("log_likelihood needs a piecewise baseline")
    d = _Design(_cohort(records), table, model.baseline.cut_points)
    theta = np.concatenate([np.asarray(model.coefficients, dtype=float), model.baseline.log_levels])
    if d.p != len(model.coefficients):
        raise ValidationError(f"records have {d.p} covariate columns, model has {len(model.coefficients)}")
    return d.loglik(theta)


def fit_excess_model(records, table: LifeTable, spec: FitSpec | None = None, schema: CovariateSchema | None = None) -> FitResult:
    """Fit ``(beta, chi)`` by damped Newton ascent.

    Initial values are ``beta = 0`` and ``chi_k = log(D / PT)`` for all bands.
    Log-levels are kept above ``CHI_FLOOR``; a level stuck at the floor is
    flagged and excluded from the convergence test.
    """
    spec = spec or FitSpec()
    cohort = _cohort(records)
    d = _Design(cohort, table, spec.cut_points)
    empty = [f"[{a:g}, {b:g})" for a, b, e in zip(d.cuts[:-1], d.cuts[1:], d.exposure) if e <= 0]
    if empty:
        raise ConfigurationError(f"no person-time in band(s) {', '.join(empty)}")
    if d.n_events == 0:
        raise ConfigurationError("baseline data contain no events")
    if schema is not None and schema.variables and len(schema.columns) != d.p:
        raise ValidationError(f"schema has {len(schema.columns)} columns, data have {d.p}")

    p, K = d.p, d.K
    theta = np.concatenate([np.zeros(p), np.full(K, math.log(d.n_events / d.exposure.sum()))])
    lower = np.concatenate([np.full(p, -np.inf), np.full(K, CHI_FLOOR)])
    ll, g, H = d.derivatives(theta)
    trace = [ll]
    lam = 1e-8
    converged = False
    it = 0
    for it in range(1, int(spec.max_iter) + 1):
        free = ~((theta <= lower) & (g < 0))
        if np.max(np.abs(g[free]), initial=0.0) <= spec.tol:
            converged = True
            it -= 1
            break
        J = -H[np.ix_(free, free)]
        gf = g[free]
        accepted = False
        for _ in range(60):
            A = J + lam * np.diag(np.maximum(np.abs(np.diag(J)), 1e-12))
            try:
                L = np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                lam = max(lam * 10, 1e-6)
                continue
            step = np.zeros_like(theta)
            step[free] = np.linalg.solve(L.T, np.linalg.solve(L, gf))
            cand = np.maximum(theta + step, lower)
            ll_new = d.loglik(cand, with_hp=False)
            if ll_new >= ll:
                theta = cand
                accepted = True
                lam = max(lam / 10, 1e-12)
                break
            lam = max(lam * 10, 1e-6)
        if not accepted:
            log.warning("no ascent step found after %d iterations", it)
            break
        ll, g, H = d.derivatives(theta)
        trace.append(ll)

    free = ~((theta <= lower) & (g < 0))
    grad_norm = float(np.max(np.abs(g[free]), initial=0.0))
    converged = converged or grad_norm <= spec.tol
    flags = []
    at_floor = np.flatnonzero(theta[p:] <= CHI_FLOOR)
    if len(at_floor):
        flags.append("chi_floor:" + ",".join(str(int(k)) for k in at_floor))
    if not converged:
        flags.append("not_converged")

    se = np.full(p + K, np.nan)
    J = -H[np.ix_(free, free)]
    try:
        cov = np.linalg.inv(J)
        if np.all(np.diag(cov) > 0):
            se[free] = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        flags.append("singular_information")

    model = ExcessHazardModel(
        PiecewiseBaseline(spec.cut_points, theta[p:]),
        theta[:p].copy(),
        schema if schema is not None else CovariateSchema(()),
    )
    return FitResult(model, ll - float(np.sum(d.HP)), grad_norm, converged, it, se, tuple(flags), trace)
