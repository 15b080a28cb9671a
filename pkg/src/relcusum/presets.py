"""Reference simulation set-up: colorectal-cancer-like covariates and baselines.

The covariate effects and proportions, the piecewise baseline, the Weibull
alternative truth and the interim censoring rate define the reference
simulation design. Real population rates are not bundled;
:func:`norway_like_table` is a Gompertz-Makeham stand-in with roughly
Norwegian 2010s levels and a steady calendar improvement.
"""

from __future__ import annotations

import math

import numpy as np

from .excess_model import CovariateSchema, ExcessHazardModel, PiecewiseBaseline, Variable, WeibullBaseline
from .lifetable import LifeTable
from .simulate import CensoringSpec, ParametricCovariates, TruncatedNormal

CUT_POINTS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0)
CHI = (-1.4, -1.6, -1.8, -2.0, -2.1, -3.0)
WEIBULL_SHAPE = 0.65
WEIBULL_SCALE = 0.25
CENSOR_RATE = 0.000275
START_YEAR = 2010.0

SCHEMA = CovariateSchema((
    Variable("sex", ("M", "F")),
    Variable("icd", ("0", "1", "2", "3")),
    Variable("morphology", ("adenocarcinoma", "mucinous")),
    Variable("seer", ("distant", "localised", "regional", "unknown")),
    Variable("surgery", ("0", "1", "2")),
))

# same order as SCHEMA.columns
BETA = (0.005, 0.500, 0.200, 0.300, -0.050, -3.000, -1.750, -1.000, 1.500, 2.500)

PROPORTIONS = {
    "icd": (0.27, 0.44, 0.28, 0.01),
    "morphology": (0.90, 0.10),
    "seer": (0.20, 0.20, 0.55, 0.05),
    "surgery": (0.8275, 0.1715, 0.0010),
}

AGE = TruncatedNormal(mean=75.0, sd=10.0, lower=50.0, upper=105.0)


def covariate_source() -> ParametricCovariates:
    return ParametricCovariates(SCHEMA, PROPORTIONS, AGE, female_share=0.5)


def piecewise_model() -> ExcessHazardModel:
    return ExcessHazardModel(PiecewiseBaseline(CUT_POINTS, CHI), np.array(BETA), SCHEMA)


def weibull_model() -> ExcessHazardModel:
    return ExcessHazardModel(WeibullBaseline(WEIBULL_SHAPE, WEIBULL_SCALE), np.array(BETA), SCHEMA)


def censoring() -> CensoringSpec:
    return CensoringSpec(CENSOR_RATE)


# Gompertz-Makeham parameters (log-hazard intercept, slope per year of age, Makeham term)
_GM = {"M": (-11.31, 0.1053, 2e-4), "F": (-11.99, 0.1101, 1e-4)}
_IMPROVEMENT = 0.015  # yearly relative decline in mortality
_REF_YEAR = 2015


def norway_like_rate(sex: str, age: int, year: int) -> float:
    a, b, c = _GM[sex]
    return (math.exp(a + b * age) + c) * math.exp(-_IMPROVEMENT * (year - _REF_YEAR))


def norway_like_table(ages=range(0, 121), years=range(2010, 2021)) -> LifeTable:
    return LifeTable.from_function(norway_like_rate, ages, years)
