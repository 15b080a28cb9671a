"""Patient records, the column-oriented :class:`Cohort`, and patient CSV I/O."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .excess_model import CovariateSchema, CovariateVector
from .lifetable import SEXES, Demographics, sex_code

STATUSES = ("censored", "event")


@dataclass(frozen=True)
class PatientRecord:
    """One monitored individual.

    ``arrival`` is measured in years since monitoring start; ``follow_up`` is the
    observed ``min(T, C)``. The cause of an event is not recorded.
    """

    arrival: float
    demographics: Demographics
    covariates: CovariateVector
    follow_up: float
    status: str

    def __post_init__(self):
        if not isinstance(self.covariates, CovariateVector):
            object.__setattr__(self, "covariates", CovariateVector(tuple(self.covariates)))
        if self.status not in STATUSES:
            raise ValidationError(f"status must be 'event' or 'censored', got {self.status!r}")
        if not (self.arrival >= 0 and math.isfinite(self.arrival)):
            raise ValidationError(f"arrival must be finite and >= 0, got {self.arrival}")
        if not (self.follow_up >= 0 and math.isfinite(self.follow_up)):
            raise ValidationError(f"follow_up must be finite and >= 0, got {self.follow_up}")

    @property
    def event(self) -> bool:
        return self.status == "event"


class Cohort:
    """Column-oriented batch of records; the form every vectorised routine works on."""

    __slots__ = ("arrival", "sex", "age", "entry_year", "X", "follow_up", "event")

    def __init__(self, arrival, sex, age, entry_year, X, follow_up, event):
        self.arrival = np.asarray(arrival, dtype=float)
        n = len(self.arrival)
        self.sex = np.asarray(sex, dtype=np.intp).reshape(n)
        self.age = np.asarray(age, dtype=float).reshape(n)
        self.entry_year = np.asarray(entry_year, dtype=float).reshape(n)
        X = np.asarray(X, dtype=float)
        if X.ndim == 2 and X.shape[0] == n:
            self.X = X
        elif X.size == 0:
            self.X = np.zeros((n, 0))
        else:
            self.X = X.reshape(n, -1)
        self.follow_up = np.asarray(follow_up, dtype=float).reshape(n)
        self.event = np.asarray(event, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.arrival)

    @classmethod
    def empty(cls, p: int = 0) -> "Cohort":
        z = np.zeros(0)
        return cls(z, z.astype(np.intp), z, z, np.zeros((0, p)), z, z.astype(bool))

    @classmethod
    def from_records(cls, records) -> "Cohort":
        records = list(records)
        if not records:
            return cls.empty()
        p = len(records[0].covariates)
        if any(len(r.covariates) != p for r in records):
            raise ValidationError("records have covariate vectors of different lengths")
        return cls(
            [r.arrival for r in records],
            [sex_code(r.demographics.sex) for r in records],
            [r.demographics.age_at_entry for r in records],
            [r.demographics.entry_calendar_time for r in records],
            np.array([r.covariates.values for r in records], dtype=float).reshape(len(records), p),
            [r.follow_up for r in records],
            [r.event for r in records],
        )

    def to_records(self) -> list[PatientRecord]:
        return [
            PatientRecord(
                float(self.arrival[i]),
                Demographics(SEXES[self.sex[i]], float(self.age[i]), float(self.entry_year[i])),
                CovariateVector(tuple(self.X[i])),
                float(self.follow_up[i]),
                STATUSES[int(self.event[i])],
            )
            for i in range(len(self))
        ]

    def subset(self, mask) -> "Cohort":
        return Cohort(
            self.arrival[mask], self.sex[mask], self.age[mask], self.entry_year[mask],
            self.X[mask], self.follow_up[mask], self.event[mask],
        )

    def capped(self, t_d) -> "Cohort":
        """Follow-up truncated at ``t_d``: events after the cap become censored at it."""
        if t_d is None:
            return self
        over = self.follow_up > t_d
        return Cohort(
            self.arrival, self.sex, self.age, self.entry_year, self.X,
            np.where(over, t_d, self.follow_up), self.event & ~over,
        )

    def sorted_by_arrival(self) -> "Cohort":
        return self.subset(np.argsort(self.arrival, kind="stable"))


# -- CSV ------------------------------------------------------------------------

_FIXED = ("arrival", "sex", "age_at_entry", "entry_year")


def _decode_columns(schema: CovariateSchema, X):
    """Invert dummy coding back to raw covariate values, column by column."""
    out = {}
    j = 0
    for var in schema.variables:
        if var.categorical:
            width = len(var.levels) - 1
            block = X[:, j:j + width]
            idx = np.where(block.any(axis=1), block.argmax(axis=1) + 1, 0) if width else np.zeros(len(X), int)
            out[var.name] = [var.levels[k] for k in idx]
            j += width
        else:
            out[var.name] = [repr(float(v)) for v in X[:, j]]
            j += 1
    return out


def write_patients(cohort: Cohort, schema: CovariateSchema, path_or_stream) -> None:
    """Write ``arrival,sex,age_at_entry,entry_year,<covariates>,follow_up,status``."""
    close = False
    if isinstance(path_or_stream, (str, os.PathLike)):
        stream = open(path_or_stream, "w", newline="", encoding="utf-8")
        close = True
    else:
        stream = path_or_stream
    try:
        names = [v.name for v in schema.variables if v.name not in ("sex",)]
        raw = _decode_columns(schema, cohort.X)
        w = csv.writer(stream, lineterminator="\n")
        w.writerow([*_FIXED, *names, "follow_up", "status"])
        for i in range(len(cohort)):
            w.writerow([
                repr(float(cohort.arrival[i])), SEXES[cohort.sex[i]], repr(float(cohort.age[i])),
                repr(float(cohort.entry_year[i])), *(raw[nm][i] for nm in names),
                repr(float(cohort.follow_up[i])), STATUSES[int(cohort.event[i])],
            ])
    finally:
        if close:
            stream.close()


def read_patients(source, schema: CovariateSchema) -> Cohort:
    """Parse a patient CSV and dummy-code its covariates with ``schema``.

    A covariate named ``sex`` is taken from the demographic ``sex`` column, so
    gender can enter both the population and the excess hazard.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_patients(fh, schema)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty patient file", line=1) from None
    needed = [*_FIXED, "follow_up", "status"] + [v.name for v in schema.variables if v.name != "sex"]
    missing = [c for c in needed if c not in header]
    if missing:
        raise ParseError(f"patient file is missing column(s): {', '.join(missing)}", line=1)
    col = {h: i for i, h in enumerate(header)}
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        rows.append((lineno, row))

    n = len(rows)
    arrival = np.empty(n)
    sex = np.empty(n, dtype=np.intp)
    age = np.empty(n)
    year = np.empty(n)
    fu = np.empty(n)
    ev = np.empty(n, dtype=bool)
    raw = {v.name: [] for v in schema.variables}
    for i, (lineno, row) in enumerate(rows):
        try:
            arrival[i] = float(row[col["arrival"]])
            age[i] = float(row[col["age_at_entry"]])
            year[i] = float(row[col["entry_year"]])
            fu[i] = float(row[col["follow_up"]])
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line=lineno) from None
        try:
            sex[i] = sex_code(row[col["sex"]])
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno) from None
        status = row[col["status"]].strip().lower()
        if status not in STATUSES:
            raise ParseError(f"status must be 'event' or 'censored', got {status!r}", line=lineno)
        ev[i] = status == "event"
        if not (arrival[i] >= 0 and fu[i] >= 0 and age[i] >= 0) or not np.isfinite([arrival[i], fu[i], age[i], year[i]]).all():
            raise ParseError("arrival, age_at_entry and follow_up must be finite and >= 0", line=lineno)
        for v in schema.variables:
            raw[v.name].append(SEXES[sex[i]] if v.name == "sex" else row[col[v.name]])
    try:
        X = schema.encode_columns(raw) if schema.variables else np.zeros((n, 0))
    except ValidationError as exc:
        raise ParseError(str(exc)) from None
    return Cohort(arrival, sex, age, year, X, fu, ev)
