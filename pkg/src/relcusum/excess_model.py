"""Proportional excess hazard models with piecewise-constant or Weibull baselines.

The in-control excess hazard of an individual with covariate vector ``x`` is
``h0(t) * exp(beta . x)``. Baselines expose vectorised ``hazard``,
``cumulative`` and ``inverse`` (of the cumulative) for the reference level; the
model scales them by ``exp(lp)`` where ``lp`` is the linear predictor.
"""

from __future__ import annotations

import configparser
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, SupportError, ValidationError


# -- covariates ---------------------------------------------------------------


@dataclass(frozen=True)
class Variable:
    """One input column. Categorical variables are dummy-coded against ``levels[0]``."""

    name: str
    levels: tuple[str, ...] = ()

    @property
    def categorical(self) -> bool:
        return bool(self.levels)

    @property
    def reference(self):
        return self.levels[0] if self.levels else None

    def columns(self) -> list[str]:
        if not self.categorical:
            return [self.name]
        return [f"{self.name}={lvl}" for lvl in self.levels[1:]]


@dataclass(frozen=True)
class CovariateSchema:
    variables: tuple[Variable, ...] = ()

    @classmethod
    def categorical(cls, **levels) -> "CovariateSchema":
        """Shorthand: ``CovariateSchema.categorical(icd=("0", "1", "2"))``; first level is the reference."""
        return cls(tuple(Variable(k, tuple(str(v) for v in vs)) for k, vs in levels.items()))

    @property
    def columns(self) -> list[str]:
        return [c for v in self.variables for c in v.columns()]

    def __len__(self):
        return len(self.columns)

    def encode(self, values) -> np.ndarray:
        """Dummy-code a mapping ``{variable name: raw value}`` into a covariate vector."""
        out = []
        for var in self.variables:
            if var.name not in values:
                raise ValidationError(f"missing covariate {var.name!r}")
            raw = values[var.name]
            if var.categorical:
                raw = str(raw).strip()
                if raw not in var.levels:
                    raise ValidationError(
                        f"covariate {var.name!r}: unknown level {raw!r} (levels {', '.join(var.levels)})"
                    )
                out.extend(1.0 if raw == lvl else 0.0 for lvl in var.levels[1:])
            else:
                out.append(float(raw))
        return np.array(out, dtype=float)

    def encode_columns(self, columns) -> np.ndarray:
        """Dummy-code whole columns (``{name: sequence}``) into an ``(n, p)`` design matrix."""
        blocks = []
        n = None
        for var in self.variables:
            if var.name not in columns:
                raise ValidationError(f"missing covariate column {var.name!r}")
            col = columns[var.name]
            n = len(col)
            if var.categorical:
                raw = np.array([str(v).strip() for v in col])
                unknown = set(raw) - set(var.levels)
                if unknown:
                    raise ValidationError(
                        f"covariate {var.name!r}: unknown level(s) {', '.join(sorted(unknown))}"
                    )
                for lvl in var.levels[1:]:
                    blocks.append((raw == lvl).astype(float))
            else:
                blocks.append(np.asarray(col, dtype=float))
        if not blocks:
            return np.zeros((0 if n is None else n, 0))
        return np.column_stack(blocks)


@dataclass(frozen=True)
class CovariateVector:
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __len__(self):
        return len(self.values)

    def as_array(self):
        return np.array(self.values, dtype=float)


# -- baselines ----------------------------------------------------------------


class PiecewiseBaseline:
    """``h0(t) = exp(log_levels[k])`` on ``[cut_points[k], cut_points[k+1])``.

    The hazard is right-continuous at interior cut points; the last band is
    closed on the right. Evaluation past ``cut_points[-1]`` raises
    :class:`SupportError` -- use :meth:`extended_to` to stretch the last band
    deliberately.
    """

    kind = "piecewise"

    def __init__(self, cut_points, log_levels):
        cuts = np.array(cut_points, dtype=float)
        chi = np.array(log_levels, dtype=float)
        if cuts.ndim != 1 or len(cuts) < 2:
            raise ValidationError("need at least two cut points (one band)")
        if cuts[0] != 0:
            raise ValidationError("first cut point must be 0")
        if np.any(np.diff(cuts) <= 0):
            raise ValidationError("cut points must be strictly increasing")
        if len(chi) != len(cuts) - 1:
            raise ValidationError(f"{len(cuts) - 1} bands but {len(chi)} log levels")
        if not np.all(np.isfinite(chi)):
            raise ValidationError("log levels must be finite")
        cuts.setflags(write=False)
        chi.setflags(write=False)
        self.cut_points = cuts
        self.log_levels = chi
        self.levels = np.exp(chi)
        # cumulative hazard at each cut point
        self._cum = np.concatenate([[0.0], np.cumsum(self.levels * np.diff(cuts))])

    @property
    def n_bands(self) -> int:
        return len(self.log_levels)

    @property
    def support_end(self) -> float:
        return float(self.cut_points[-1])

    def extended_to(self, t_max: float) -> "PiecewiseBaseline":
        """Copy whose last band reaches ``t_max`` (never shrinks the support)."""
        cuts = self.cut_points.copy()
        cuts[-1] = max(cuts[-1], float(t_max))
        return PiecewiseBaseline(cuts, self.log_levels)

    def band_index(self, t):
        """Band containing ``t``, right-continuous, last band closed."""
        idx = np.searchsorted(self.cut_points, t, side="right") - 1
        return np.clip(idx, 0, self.n_bands - 1)

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise SupportError("time must be >= 0")
        if np.any(t > self.support_end):
            raise SupportError(
                f"time {float(np.max(t)):g} beyond baseline support [0, {self.support_end:g}]; "
                "extend the last band explicitly if extrapolation is intended"
            )
        return t

    def hazard(self, t):
        t = self._check(t)
        return self.levels[self.band_index(t)]

    def cumulative(self, t):
        t = self._check(t)
        k = self.band_index(t)
        return self._cum[k] + self.levels[k] * (t - self.cut_points[k])

    def inverse(self, target):
        """Smallest ``t`` with ``H0(t) >= target``; ``inf`` past the support."""
        target = np.asarray(target, dtype=float)
        k = np.searchsorted(self._cum, target, side="left") - 1
        k = np.clip(k, 0, self.n_bands - 1)
        t = self.cut_points[k] + (target - self._cum[k]) / self.levels[k]
        t = np.where(target <= 0, 0.0, t)
        return np.where(target > self._cum[-1], np.inf, np.minimum(t, self.cut_points[k + 1]))

    def knots(self):
        return self.cut_points

    def params(self) -> dict:
        return {"cut_points": self.cut_points.tolist(), "log_levels": self.log_levels.tolist()}

    def __eq__(self, other):
        return (
            isinstance(other, PiecewiseBaseline)
            and np.array_equal(self.cut_points, other.cut_points)
            and np.array_equal(self.log_levels, other.log_levels)
        )

    def __repr__(self):
        return f"PiecewiseBaseline(cut_points={self.cut_points.tolist()}, log_levels={self.log_levels.tolist()})"


class WeibullBaseline:
    """``h0(t) = a * b * t**(a - 1)``, ``H0(t) = b * t**a``."""

    kind = "weibull"
    support_end = math.inf

    def __init__(self, shape: float, scale: float):
        if not (shape > 0 and scale > 0):
            raise ValidationError("Weibull shape and scale must be > 0")
        self.shape = float(shape)
        self.scale = float(scale)

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise SupportError("time must be >= 0")
        with np.errstate(divide="ignore"):
            return self.shape * self.scale * t ** (self.shape - 1.0)

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise SupportError("time must be >= 0")
        return self.scale * t**self.shape

    def inverse(self, target):
        target = np.asarray(target, dtype=float)
        return (np.clip(target, 0.0, None) / self.scale) ** (1.0 / self.shape)

    def knots(self):
        return None

    def params(self) -> dict:
        return {"shape": self.shape, "scale": self.scale}

    def __eq__(self, other):
        return isinstance(other, WeibullBaseline) and (self.shape, self.scale) == (other.shape, other.scale)

    def __repr__(self):
        return f"WeibullBaseline(shape={self.shape!r}, scale={self.scale!r})"


@dataclass(frozen=True)
class ExcessHazardModel:
    """``h_E(t, x) = h0(t) * exp(beta . x)``."""

    baseline: object
    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))
    schema: CovariateSchema = field(default_factory=CovariateSchema)

    def __post_init__(self):
        beta = np.array(self.coefficients, dtype=float).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise ValidationError("coefficients must be finite")
        if self.schema.variables and len(self.schema.columns) != len(beta):
            raise ValidationError(
                f"schema has {len(self.schema.columns)} columns but {len(beta)} coefficients"
            )
        beta.setflags(write=False)
        object.__setattr__(self, "coefficients", beta)

    @property
    def support_end(self) -> float:
        return self.baseline.support_end

    def linear_predictor(self, x):
        x = np.asarray(x.as_array() if isinstance(x, CovariateVector) else x, dtype=float)
        if x.shape[-1] != len(self.coefficients):
            raise ValidationError(
                f"covariate vector has length {x.shape[-1]}, model has {len(self.coefficients)} coefficients"
            )
        if len(self.coefficients) == 0:
            return np.zeros(x.shape[:-1])
        return x @ self.coefficients

    def hazard(self, t, lp):
        return self.baseline.hazard(t) * np.exp(lp)

    def cumulative(self, t, lp):
        return self.baseline.cumulative(t) * np.exp(lp)

    def inverse(self, target, lp):
        return self.baseline.inverse(np.asarray(target) * np.exp(-np.asarray(lp)))

    def with_baseline(self, baseline) -> "ExcessHazardModel":
        return ExcessHazardModel(baseline, self.coefficients, self.schema)

    def extended_to(self, t_max: float) -> "ExcessHazardModel":
        """Stretch a piecewise baseline's last band to ``t_max``; Weibull models are returned as is."""
        if isinstance(self.baseline, PiecewiseBaseline):
            return self.with_baseline(self.baseline.extended_to(t_max))
        return self


def excess_hazard(model: ExcessHazardModel, x, t: float) -> float:
    """In-control excess hazard of one individual at follow-up time ``t``."""
    if isinstance(model.baseline, WeibullBaseline) and t == 0 and model.baseline.shape < 1:
        raise SupportError("Weibull hazard with shape < 1 is infinite at t = 0")
    return float(model.hazard(t, model.linear_predictor(x)))


def cumulative_excess_hazard(model: ExcessHazardModel, x, t: float) -> float:
    return float(model.cumulative(t, model.linear_predictor(x)))


# -- serialisation ------------------------------------------------------------


def _fmt(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ParseError(f"bad number list for {what}: {text!r}") from None


def _parser():
    # dummy-coded column names contain "=", so ":" is the only key delimiter
    cp = configparser.ConfigParser(interpolation=None, delimiters=(":",))
    cp.optionxform = str
    return cp


def dumps_model(model: ExcessHazardModel) -> str:
    cp = _parser()
    b = model.baseline
    if isinstance(b, PiecewiseBaseline):
        cp["baseline"] = {"kind": "piecewise", "cut_points": _fmt(b.cut_points), "log_levels": _fmt(b.log_levels)}
    elif isinstance(b, WeibullBaseline):
        cp["baseline"] = {"kind": "weibull", "shape": repr(b.shape), "scale": repr(b.scale)}
    else:
        raise ValidationError(f"cannot serialise baseline {b!r}")
    cp["coefficients"] = {name: repr(float(v)) for name, v in zip(model.schema.columns, model.coefficients)}
    cp["covariates"] = {
        v.name: ("categorical " + " ".join(v.levels)) if v.categorical else "numeric"
        for v in model.schema.variables
    }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_schema_section(section) -> CovariateSchema:
    """``name = categorical L0 L1 ...`` (``L0`` is the reference) or ``name = numeric``."""
    variables = []
    for name, spec in section.items():
        parts = spec.split()
        if not parts or parts[0] not in ("categorical", "numeric"):
            raise ParseError(f"covariate {name!r}: expected 'categorical <levels>' or 'numeric'")
        if parts[0] == "categorical":
            if len(parts) < 2:
                raise ParseError(f"covariate {name!r}: categorical needs at least one level")
            variables.append(Variable(name, tuple(parts[1:])))
        else:
            variables.append(Variable(name))
    return CovariateSchema(tuple(variables))


def loads_model(text: str) -> ExcessHazardModel:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"model file: {exc}") from None
    if "baseline" not in cp:
        raise ParseError("model file has no [baseline] section")
    sec = cp["baseline"]
    kind = sec.get("kind", "").strip()
    try:
        if kind == "piecewise":
            baseline = PiecewiseBaseline(_floats(sec["cut_points"], "cut_points"), _floats(sec["log_levels"], "log_levels"))
        elif kind == "weibull":
            baseline = WeibullBaseline(float(sec["shape"]), float(sec["scale"]))
        else:
            raise ParseError(f"unknown baseline kind {kind!r}")
    except KeyError as exc:
        raise ParseError(f"[baseline] lacks {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"[baseline]: {exc}") from None
    schema = parse_schema_section(cp["covariates"]) if "covariates" in cp else CovariateSchema()
    coefs = cp["coefficients"] if "coefficients" in cp else {}
    missing = [c for c in schema.columns if c not in coefs]
    if missing:
        raise ParseError(f"model file lacks coefficient(s) {', '.join(missing)}")
    extra = [c for c in coefs if c not in schema.columns]
    if extra:
        raise ParseError(f"coefficient(s) {', '.join(extra)} not in covariate schema")
    try:
        beta = [float(coefs[c]) for c in schema.columns]
    except ValueError as exc:
        raise ParseError(f"[coefficients]: {exc}") from None
    return ExcessHazardModel(baseline, np.array(beta), schema)


def save_model(model: ExcessHazardModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> ExcessHazardModel:
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file {path} not found")
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
