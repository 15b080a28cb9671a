"""Population mortality tables and hazard evaluation along the Lexis diagonal.

A life table holds yearly hazard rates by sex, integer attained age and integer
calendar year. Within a cell the hazard is constant, and an individual moves
diagonally through the table: attained age and calendar time both advance with
follow-up time. Everything below is exact for that piecewise-constant model.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, SupportError, ValidationError

SEXES = ("M", "F")
_SEX_ALIASES = {"m": 0, "male": 0, "f": 1, "female": 1}


def sex_code(sex) -> int:
    """Map ``'M'``/``'F'`` (or male/female, or 0/1) to the integer code used internally."""
    if isinstance(sex, (int, np.integer)) and sex in (0, 1):
        return int(sex)
    try:
        return _SEX_ALIASES[str(sex).strip().lower()]
    except KeyError:
        raise ValidationError(f"unknown sex {sex!r}; expected M or F") from None


@dataclass(frozen=True)
class Demographics:
    """Variables that determine the population hazard of one individual."""

    sex: str
    age_at_entry: float
    entry_calendar_time: float

    def __post_init__(self):
        object.__setattr__(self, "sex", SEXES[sex_code(self.sex)])
        if not self.age_at_entry >= 0:
            raise ValidationError(f"age_at_entry must be >= 0, got {self.age_at_entry}")


class LifeTable:
    """Yearly hazard rates indexed by (sex, integer age, integer calendar year).

    Parameters
    ----------
    rates : array of shape (2, n_ages, n_years)
        ``rates[s, a, y]`` is the hazard for sex code ``s`` at age ``age_min + a``
        in calendar year ``year_min + y``.
    age_min, year_min : int
        Lower edges of the table (inclusive).
    """

    def __init__(self, rates, age_min: int, year_min: int):
        rates = np.array(rates, dtype=float)
        if rates.ndim != 3 or rates.shape[0] != 2:
            raise ValidationError("rates must have shape (2, n_ages, n_years)")
        if rates.shape[1] == 0 or rates.shape[2] == 0:
            raise ValidationError("life table is empty")
        if not np.all(np.isfinite(rates)):
            raise ValidationError("life table rates must be finite")
        if np.any(rates < 0):
            raise ValidationError("life table rates must be >= 0")
        rates.setflags(write=False)
        self.rates = rates
        self.age_min = int(age_min)
        self.year_min = int(year_min)

    @property
    def age_span(self) -> tuple[int, int]:
        return self.age_min, self.age_min + self.rates.shape[1] - 1

    @property
    def year_span(self) -> tuple[int, int]:
        return self.year_min, self.year_min + self.rates.shape[2] - 1

    def __len__(self):
        return self.rates.size

    def __repr__(self):
        return f"LifeTable(ages={self.age_span}, years={self.year_span})"

    @classmethod
    def from_function(cls, fn, ages, years) -> "LifeTable":
        """Tabulate ``fn(sex, age, year)`` (sex given as ``'M'``/``'F'``) on integer grids."""
        ages = list(ages)
        years = list(years)
        rates = np.array(
            [[[fn(s, a, y) for y in years] for a in ages] for s in SEXES], dtype=float
        )
        return cls(rates, ages[0], years[0])

    @classmethod
    def constant(cls, rate, ages=range(0, 121), years=range(1900, 2101)) -> "LifeTable":
        ages, years = list(ages), list(years)
        return cls(np.full((2, len(ages), len(years)), float(rate)), ages[0], years[0])

    def rate(self, sex, age: int, year: int) -> float:
        """Rate of a single cell; raises :class:`SupportError` naming the cell if absent."""
        s = sex_code(sex)
        a, y = int(age) - self.age_min, int(year) - self.year_min
        if not (0 <= a < self.rates.shape[1] and 0 <= y < self.rates.shape[2]):
            raise SupportError(
                f"life table has no cell (sex={SEXES[s]}, age={int(age)}, year={int(year)}); "
                f"ages {self.age_span}, years {self.year_span}"
            )
        return float(self.rates[s, a, y])

    # -- vectorised internals -------------------------------------------------

    def _lookup(self, sex, age_idx, year_idx, need):
        """Gather rates for integer cell indices; cells flagged in ``need`` must exist."""
        a = age_idx - self.age_min
        y = year_idx - self.year_min
        na, ny = self.rates.shape[1], self.rates.shape[2]
        bad = need & ((a < 0) | (a >= na) | (y < 0) | (y >= ny))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            pick = lambda v: int(np.broadcast_to(v, bad.shape).reshape(-1)[i])  # noqa: E731
            raise SupportError(
                f"life table has no cell (sex={SEXES[pick(sex)]}, age={pick(age_idx)}, "
                f"year={pick(year_idx)}); "
                f"ages {self.age_span}, years {self.year_span}"
            )
        return self.rates[sex, np.clip(a, 0, na - 1), np.clip(y, 0, ny - 1)]

    def hazard(self, sex, age, year):
        """Vectorised point lookup at real-valued attained age and calendar time."""
        sex = np.asarray(sex, dtype=np.intp)
        age_idx = np.floor(np.asarray(age, dtype=float)).astype(np.intp)
        year_idx = np.floor(np.asarray(year, dtype=float)).astype(np.intp)
        shape = np.broadcast(sex, age_idx, year_idx).shape
        return self._lookup(sex, age_idx, year_idx, np.ones(shape, dtype=bool))

    def _segments(self, age0, year0):
        """Yield ``(start, end, age_idx, year_idx)`` for successive Lexis cells.

        Follow-up time is split at every integer crossing of attained age or
        calendar year. Diagonal cells ``(ia+m, iy+m)`` alternate with the
        off-diagonal cell entered when only one of the two has crossed.
        """
        ia = np.floor(age0).astype(np.intp)
        iy = np.floor(year0).astype(np.intp)
        da = 1.0 - (age0 - ia)
        dy = 1.0 - (year0 - iy)
        d1 = np.minimum(da, dy)
        d2 = np.maximum(da, dy)
        age_first = da < dy
        m = 0
        while True:
            start = np.zeros_like(d1) if m == 0 else (m - 1) + d2
            yield start, m + d1, ia + m, iy + m
            yield m + d1, m + d2, ia + m + age_first, iy + m + (~age_first)
            m += 1

    def cumulative(self, sex, age0, year0, t):
        """Vectorised integral of the hazard over follow-up ``[0, t]``."""
        sex, age0, year0, t = np.broadcast_arrays(
            np.asarray(sex, dtype=np.intp),
            np.asarray(age0, dtype=float),
            np.asarray(year0, dtype=float),
            np.asarray(t, dtype=float),
        )
        if np.any(t < 0):
            raise SupportError("follow-up time must be >= 0")
        total = np.zeros(t.shape)
        if t.size == 0:
            return total
        t_max = t.max()
        for start, end, ai, yi in self._segments(age0, year0):
            if np.all(start >= t_max):
                break
            overlap = np.clip(np.minimum(end, t) - start, 0.0, None)
            need = overlap > 0
            if np.any(need):
                total += overlap * self._lookup(sex, ai, yi, need)
        return total

    def sample_time(self, sex, age0, year0, target, horizon):
        """Invert the cumulative hazard: first ``t`` with ``H(t) >= target``.

        The walk stops at ``horizon`` (per individual); individuals whose
        cumulative hazard stays below ``target`` up to the horizon get ``inf``.
        """
        sex, age0, year0, target, horizon = np.broadcast_arrays(
            np.asarray(sex, dtype=np.intp),
            np.asarray(age0, dtype=float),
            np.asarray(year0, dtype=float),
            np.asarray(target, dtype=float),
            np.asarray(horizon, dtype=float),
        )
        out = np.full(target.shape, np.inf)
        if target.size == 0:
            return out
        acc = np.zeros(target.shape)
        open_ = target > 0
        out[~open_] = 0.0
        for start, end, ai, yi in self._segments(age0, year0):
            live = open_ & (start < horizon)
            if not np.any(live):
                break
            seg_end = np.minimum(end, horizon)
            length = np.clip(seg_end - start, 0.0, None)
            rate = self._lookup(sex, ai, yi, live & (length > 0))
            gain = rate * length
            hit = live & (acc + gain >= target) & (length > 0)
            if np.any(hit):
                with np.errstate(divide="ignore", invalid="ignore"):
                    out[hit] = start[hit] + (target[hit] - acc[hit]) / rate[hit]
                # rounding can push the solution a hair past the segment end
                out[hit] = np.minimum(out[hit], seg_end[hit])
                open_ &= ~hit
            acc = np.where(live, acc + gain, acc)
        return out

    # -- scalar API ------------------------------------------------------------

    def to_csv(self, path_or_stream) -> None:
        close = False
        if isinstance(path_or_stream, (str, os.PathLike)):
            stream = open(path_or_stream, "w", newline="", encoding="utf-8")
            close = True
        else:
            stream = path_or_stream
        try:
            w = csv.writer(stream, lineterminator="\n")
            w.writerow(["sex", "age", "year", "rate"])
            for s, sex in enumerate(SEXES):
                for a in range(self.rates.shape[1]):
                    for y in range(self.rates.shape[2]):
                        w.writerow([sex, self.age_min + a, self.year_min + y, repr(float(self.rates[s, a, y]))])
        finally:
            if close:
                stream.close()


def population_hazard(table: LifeTable, z: Demographics, t: float) -> float:
    """Population hazard of individual ``z`` at follow-up time ``t`` (per year)."""
    if t < 0:
        raise SupportError("follow-up time must be >= 0")
    age = z.age_at_entry + t
    year = z.entry_calendar_time + t
    return table.rate(z.sex, math.floor(age), math.floor(year))


def cumulative_population_hazard(table: LifeTable, z: Demographics, t: float) -> float:
    """Exact integral of the population hazard over follow-up ``[0, t]``."""
    return float(table.cumulative(sex_code(z.sex), z.age_at_entry, z.entry_calendar_time, t))


def load_life_table(source) -> LifeTable:
    """Read a ``sex,age,year,rate`` CSV into a validated :class:`LifeTable`.

    ``source`` is a path or an open text stream. Duplicate keys, negative or
    non-finite rates and holes in the (age, year) rectangle are rejected.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return load_life_table(fh)
    if isinstance(source, str):
        source = io.StringIO(source)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty life table", line=1) from None
    header = [h.strip().lower() for h in header]
    missing = [c for c in ("sex", "age", "year", "rate") if c not in header]
    if missing:
        raise ParseError(f"missing column(s) {', '.join(missing)}", line=1)
    col = {name: header.index(name) for name in ("sex", "age", "year", "rate")}

    cells = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        try:
            s = sex_code(row[col["sex"]])
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno) from None
        try:
            age = int(row[col["age"]])
            year = int(row[col["year"]])
            rate = float(row[col["rate"]])
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line=lineno) from None
        if not math.isfinite(rate):
            raise ValidationError(f"line {lineno}: rate must be finite")
        if rate < 0:
            raise ValidationError(f"line {lineno}: negative rate {rate}")
        key = (s, age, year)
        if key in cells:
            raise ValidationError(f"line {lineno}: duplicate cell (sex={SEXES[s]}, age={age}, year={year})")
        cells[key] = rate

    if not cells:
        raise ValidationError("life table has no rows")
    ages = sorted({k[1] for k in cells})
    years = sorted({k[2] for k in cells})
    a0, a1, y0, y1 = ages[0], ages[-1], years[0], years[-1]
    rates = np.full((2, a1 - a0 + 1, y1 - y0 + 1), np.nan)
    for (s, a, y), r in cells.items():
        rates[s, a - a0, y - y0] = r
    holes = np.argwhere(np.isnan(rates))
    if len(holes):
        s, a, y = holes[0]
        raise ValidationError(
            f"coverage hole: no rate for (sex={SEXES[s]}, age={a0 + a}, year={y0 + y})"
        )
    return LifeTable(rates, a0, y0)
