import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import kaplan_meier, nelson_aalen
from relcusum import (
    ConfigurationError,
    Demographics,
    ExcessHazardModel,
    LifeTable,
    PiecewiseBaseline,
    Proportional,
    ValidationError,
    WeibullBaseline,
)
from relcusum.alternatives import Additive
from relcusum.presets import AGE, censoring, covariate_source
from relcusum.records import Cohort
from relcusum.simulate import (
    ArrivalProcess,
    BootstrapCovariates,
    CensoringSpec,
    ConstantHazard,
    IndividualExcessHazard,
    IndividualPopulationHazard,
    ShiftScenario,
    _excess_times,
    sample_arrivals,
    sample_covariates,
    sample_event_time,
    simulate_cohort,
    spliced_cumulative,
)

TWO_BANDS = ExcessHazardModel(PiecewiseBaseline([0.0, 1.0, 100.0], [math.log(0.2), math.log(0.1)]))
WEIBULL = ExcessHazardModel(WeibullBaseline(0.65, 0.25))


def na_check(times, H):
    """Nelson-Aalen diagnostics for draws with cumulative hazard ``H``.

    Returns the sup-norm gap on the cumulative-hazard scale below the median,
    the gap on the survivor scale over the central 95%, and the largest
    standardised gap there (variance ``sum 1/Y^2``).
    """
    times = times[np.isfinite(times)]
    t, na = nelson_aalen(times)
    n = len(times)
    var = np.cumsum(1.0 / (n - np.arange(n)) ** 2.0)
    lo, med, hi = np.quantile(times, [0.025, 0.5, 0.975])
    gap = np.abs(na - H(t))
    central = (t >= lo) & (t <= hi)
    return (
        float(np.max(gap[t <= med])),
        float(np.max(np.abs(np.exp(-na) - np.exp(-H(t)))[central])),
        float(np.max(gap[central] / np.sqrt(var[central]))),
    )


def assert_na(times, H):
    lower, surv, z = na_check(times, H)
    assert lower < 0.01 and surv < 0.01 and z < 4.0, (lower, surv, z)


class TestArrivals:
    def test_zero_rate(self, rng):
        assert len(sample_arrivals(ArrivalProcess(0.0), 10.0, rng)) == 0

    def test_mean_count(self):
        rng = np.random.default_rng(99)
        counts = [len(sample_arrivals(ArrivalProcess(250.0), 10.0, rng)) for _ in range(10_000)]
        assert 2498.5 <= np.mean(counts) <= 2501.5

    def test_sorted_within_window(self, rng):
        b = sample_arrivals(ArrivalProcess(30.0), 4.0, rng)
        assert np.all(np.diff(b) >= 0) and b.min() >= 0 and b.max() <= 4.0

    def test_deterministic(self):
        a = sample_arrivals(ArrivalProcess(5.0), 3.0, np.random.default_rng(1))
        b = sample_arrivals(ArrivalProcess(5.0), 3.0, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_negative_rate(self):
        with pytest.raises(ValidationError):
            ArrivalProcess(-1.0)


class TestCovariates:
    def test_female_share(self):
        sex, age, X = covariate_source().draw(100_000, np.random.default_rng(5))
        assert abs(sex.mean() - 0.5) < 0.005
        # the sex column of the design matrix is the demographic draw
        np.testing.assert_array_equal(X[:, 0], sex)

    def test_category_proportions(self):
        _, _, X = covariate_source().draw(100_000, np.random.default_rng(6))
        # icd=1..3 then morphology=mucinous
        np.testing.assert_allclose(X[:, 1:5].mean(axis=0), [0.44, 0.28, 0.01, 0.10], atol=0.005)

    def test_age_bounds(self):
        _, age, _ = covariate_source().draw(50_000, np.random.default_rng(7))
        assert age.min() >= 50 and age.max() <= 105
        assert np.mean(age) == pytest.approx(AGE.mean, abs=0.3)

    def test_bootstrap_single(self, rng):
        pool = Cohort([0.0], [1], [66.5], [2001.0], [[1.0, 0.0, 1.0]], [2.0], [True])
        for _ in range(5):
            z, x = sample_covariates(BootstrapCovariates(pool), rng, 2012.0)
            assert z == Demographics("F", 66.5, 2012.0)
            assert x.values == (1.0, 0.0, 1.0)

    def test_bootstrap_empty(self):
        with pytest.raises(ConfigurationError):
            BootstrapCovariates(Cohort.empty(3))


class TestEventTime:
    def test_constant(self):
        assert sample_event_time(ConstantHazard(0.1), e=0.2) == pytest.approx(2.0, rel=1e-15)

    def test_piecewise(self):
        h = IndividualExcessHazard(TWO_BANDS, np.zeros(0))
        assert sample_event_time(h, e=0.25) == pytest.approx(1.5, rel=1e-14)

    def test_weibull(self):
        h = IndividualExcessHazard(WEIBULL, np.zeros(0))
        assert sample_event_time(h, e=0.25) == pytest.approx(1.0, rel=1e-14)

    def test_beyond_support_is_inf(self, ref_model):
        h = IndividualExcessHazard(ref_model, np.zeros(len(ref_model.coefficients)))
        assert math.isinf(sample_event_time(h, e=50.0))

    def test_nelson_aalen_piecewise(self):
        e = np.random.default_rng(11).standard_exponential(100_000)
        T = TWO_BANDS.inverse(e, 0.0)
        assert_na(T, lambda t: TWO_BANDS.cumulative(t, 0.0))

    def test_nelson_aalen_weibull(self):
        e = np.random.default_rng(12).standard_exponential(100_000)
        T = WEIBULL.inverse(e, 0.3)
        assert_na(T, lambda t: WEIBULL.cumulative(t, 0.3))

    def test_nelson_aalen_life_table(self):
        table = LifeTable.from_function(lambda s, a, y: 0.002 * math.exp(0.09 * (a - 60)) * (1 - 0.01 * (y - 2000)), range(0, 141), range(2000, 2101))
        h = IndividualPopulationHazard(table, Demographics("F", 72.4, 2003.6), 60.0)
        e = np.random.default_rng(13).standard_exponential(100_000)
        T = h.inverse(e)
        assert_na(T, h.cumulative)

    def test_nelson_aalen_additive_alternative(self):
        h = IndividualExcessHazard(WEIBULL, np.zeros(0), Additive(-0.05))
        e = np.random.default_rng(14).standard_exponential(100_000)
        T = h.inverse(e)
        # H1 is bounded here, so a share of draws is inf
        assert np.isinf(T).any()
        t, na = nelson_aalen(np.where(np.isfinite(T), T, 1e9))
        keep = t <= np.quantile(T[np.isfinite(T)], 0.95)
        assert np.max(np.abs(na[keep] - h.cumulative(t[keep]))) < 0.01


class TestScenarios:
    def test_parse(self):
        alt = Proportional(1.2)
        assert ShiftScenario.parse("all_from:5", alt) == ShiftScenario.all_from(5.0, alt)
        assert ShiftScenario.parse("new_from:2.5", alt).label() == "new_from:2.5"
        with pytest.raises(ValidationError):
            ShiftScenario.parse("sometimes", alt)
        with pytest.raises(ValidationError):
            ShiftScenario.parse("all_from:1")

    @given(switch=st.floats(0.0, 9.0), lp=st.floats(-2, 2), rho=st.floats(0.2, 3.0))
    def test_splice_continuity(self, ref_model, switch, lp, rho):
        alt = Proportional(rho)
        left = spliced_cumulative(ref_model, alt, switch, switch, lp)
        right = spliced_cumulative(ref_model, alt, np.nextafter(switch, 10.0), switch, lp)
        assert float(right) - float(left) == pytest.approx(0.0, abs=1e-12)
        assert float(left) == pytest.approx(float(ref_model.cumulative(switch, lp)), rel=1e-15)

    def test_all_from_zero_equals_new_from_zero(self, ref_model, table):
        alt = Proportional(0.8)
        kw = dict(proc=ArrivalProcess(50), source=covariate_source(), model=ref_model, table=table,
                  censoring=censoring(), t_m=5.0, start_year=2010.0)
        a = simulate_cohort(scenario=ShiftScenario.all_from(0.0, alt), rng=np.random.default_rng(3), **kw)
        b = simulate_cohort(scenario=ShiftScenario.new_from(0.0, alt), rng=np.random.default_rng(3), **kw)
        np.testing.assert_array_equal(a.follow_up, b.follow_up)
        np.testing.assert_array_equal(a.event, b.event)

    def test_late_shift_is_in_control(self, ref_model, table):
        kw = dict(proc=ArrivalProcess(50), source=covariate_source(), model=ref_model, table=table,
                  censoring=censoring(), t_m=5.0, start_year=2010.0)
        a = simulate_cohort(scenario=ShiftScenario.all_from(5.0, Proportional(3.0)), rng=np.random.default_rng(4), **kw)
        b = simulate_cohort(scenario=ShiftScenario.in_control(), rng=np.random.default_rng(4), **kw)
        np.testing.assert_array_equal(a.follow_up, b.follow_up)

    def test_all_from_survivor_function(self, ref_model):
        rho, eta, B, lp = 1.8, 3.0, 1.2, 0.4
        n = 50_000
        e = np.random.default_rng(21).standard_exponential(n)
        T = _excess_times(ref_model, ShiftScenario.all_from(eta, Proportional(rho)), e, np.full(n, lp), np.full(n, B), np.full(n, 8.0))
        s = eta - B
        H0 = lambda t: ref_model.cumulative(t, lp)  # noqa: E731
        t, km = kaplan_meier(np.minimum(T, 8.0), T <= 8.0)
        m = np.minimum(t, s)
        surv = np.exp(-H0(m) - rho * (H0(t) - H0(np.maximum(m, 0.0))))
        assert np.max(np.abs(km - surv)) < 0.01


class TestCohort:
    def test_every_record_ends_in_event(self):
        table = LifeTable.constant(0.5, ages=range(0, 200), years=range(0, 200))
        model = ExcessHazardModel(PiecewiseBaseline([0.0, 1000.0], [math.log(0.1)]))
        c = simulate_cohort(ArrivalProcess(20), covariate_source_no_x(), model, table, CensoringSpec(0.0),
                            ShiftScenario.in_control(), 60.0, np.random.default_rng(8), start_year=10.0)
        long = c.arrival < 20.0
        assert long.sum() > 300 and c.event[long].all()

    def test_interim_censoring_rare(self, ref_model, table):
        c = simulate_cohort(ArrivalProcess(1000), covariate_source(), ref_model, table, censoring(),
                            ShiftScenario.in_control(), 10.0, np.random.default_rng(9), start_year=2010.0)
        assert len(c) > 9000
        admin = 10.0 - c.arrival
        interim = ~c.event & (c.follow_up < admin - 1e-12)
        assert interim.mean() < 0.01

    def test_follow_up_cap(self, ref_model, table):
        c = simulate_cohort(ArrivalProcess(200), covariate_source(), ref_model, table, censoring(),
                            ShiftScenario.in_control(), 5.0, np.random.default_rng(10), start_year=2010.0,
                            follow_up_cap=1.0)
        assert c.follow_up.max() <= 1.0

    def test_deterministic(self, ref_model, table):
        args = (ArrivalProcess(100), covariate_source(), ref_model, table, censoring(),
                ShiftScenario.all_from(2.0, Proportional(0.9)), 5.0)
        a = simulate_cohort(*args, np.random.default_rng(2), start_year=2010.0)
        b = simulate_cohort(*args, np.random.default_rng(2), start_year=2010.0)
        np.testing.assert_array_equal(a.follow_up, b.follow_up)
        np.testing.assert_array_equal(a.X, b.X)

    def test_empty(self, ref_model, table):
        c = simulate_cohort(ArrivalProcess(0), covariate_source(), ref_model, table, censoring(),
                            ShiftScenario.in_control(), 5.0, np.random.default_rng(2))
        assert len(c) == 0 and c.X.shape == (0, len(ref_model.coefficients))


def covariate_source_no_x():
    from relcusum.excess_model import CovariateSchema
    from relcusum.simulate import ParametricCovariates, TruncatedNormal

    return ParametricCovariates(CovariateSchema(()), {}, TruncatedNormal(60, 5, 40, 80))
