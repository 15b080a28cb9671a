"""CUSUM monitoring of excess mortality in registry survival data."""

from .alternatives import AcceleratedTime, Additive, Proportional, make_alternative
from .chart import ChartPath, MonitoringConfig, UpdateScheme, at_risk_time, max_statistic, run_chart
from .errors import (
    ConfigurationError,
    ModelInconsistencyError,
    ParseError,
    RelCusumError,
    SupportError,
    ValidationError,
)
from .excess_model import (
    CovariateSchema,
    CovariateVector,
    ExcessHazardModel,
    PiecewiseBaseline,
    Variable,
    WeibullBaseline,
)
from .lifetable import Demographics, LifeTable, load_life_table
from .records import Cohort, PatientRecord

__version__ = "0.1.0"
