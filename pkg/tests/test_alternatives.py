import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import IndividualOracle, PiecewiseOracle, WeibullOracle
from relcusum import (
    AcceleratedTime,
    Additive,
    Demographics,
    ExcessHazardModel,
    LifeTable,
    ModelInconsistencyError,
    PiecewiseBaseline,
    Proportional,
    ValidationError,
    WeibullBaseline,
    make_alternative,
)
from relcusum.alternatives import (
    llr_drift_term,
    llr_event_term,
    out_of_control_cumulative,
    out_of_control_excess_hazard,
)


def flat(rate, end=20.0):
    """Single-band model with constant excess hazard ``rate`` and no covariates."""
    return ExcessHazardModel(PiecewiseBaseline([0.0, end], [math.log(rate)]))


WEIBULL = ExcessHazardModel(WeibullBaseline(0.65, 0.25))
NOX = np.zeros(0)
Z = Demographics("M", 70, 2010.0)


class TestOutOfControlHazard:
    def test_proportional(self):
        assert out_of_control_excess_hazard(Proportional(2), flat(0.1), NOX, 3.0) == pytest.approx(0.2, rel=1e-14)

    def test_additive_truncated(self):
        assert out_of_control_excess_hazard(Additive(-0.3), flat(0.1), NOX, 3.0) == 0.0

    def test_accelerated_weibull(self):
        got = out_of_control_excess_hazard(AcceleratedTime(2), WEIBULL, NOX, 1.0)
        assert got == pytest.approx(2 * 0.65 * 0.25 * 2 ** -0.35, rel=1e-14)
        # 0.25494 is off in the fifth decimal; the closed form above is authoritative
        assert got == pytest.approx(0.25494, abs=1e-4)
        eps = 1e-7
        fd = (0.25 * (2 * (1 + eps)) ** 0.65 - 0.25 * 2 ** 0.65) / eps
        assert got == pytest.approx(fd, rel=1e-6)


class TestOutOfControlCumulative:
    def test_additive_untruncated(self, ref_model):
        x = np.zeros(len(ref_model.coefficients))
        got = out_of_control_cumulative(Additive(0.005), ref_model, x, 2.0)
        assert got == pytest.approx(ref_model.baseline.cumulative(2.0) + 0.01, rel=1e-14)

    def test_additive_fully_truncated(self, ref_model):
        x = np.zeros(len(ref_model.coefficients))
        for t in (0.0, 0.3, 2.0, 7.5, 10.0):
            assert out_of_control_cumulative(Additive(-1.0), ref_model, x, t) == 0.0

    def test_accelerated_slowdown(self):
        got = out_of_control_cumulative(AcceleratedTime(0.5), WEIBULL, NOX, 4.0)
        assert got == pytest.approx(0.25 * 2 ** 0.65, rel=1e-14)
        assert got == pytest.approx(0.39229, abs=5e-6)

    @pytest.mark.parametrize("gamma", [-0.5, -0.2, -0.05, 0.0, 0.05])
    @pytest.mark.parametrize("base", ["weibull_dec", "weibull_inc", "piecewise"])
    def test_additive_against_quadrature(self, gamma, base):
        if base == "piecewise":
            cuts, chi = [0, 1, 2, 3, 4, 5, 10], [-1.4, -1.6, -1.8, -2.0, -2.1, -3.0]
            model, oracle = ExcessHazardModel(PiecewiseBaseline(cuts, chi)), PiecewiseOracle(cuts, chi)
        else:
            a = 0.65 if base == "weibull_dec" else 1.4
            model, oracle = ExcessHazardModel(WeibullBaseline(a, 0.25)), WeibullOracle(a, 0.25)
        ind = IndividualOracle(oracle, 0.0, "additive", gamma, 10.0)
        t = np.array([0.0, 0.1, 0.7, 1.0, 2.5, 6.0, 9.9])
        got = Additive(gamma).cumulative1(model, t, 0.0)
        np.testing.assert_allclose(got, ind.HE1(t), rtol=0, atol=2e-6)


FAMILIES = [
    (Proportional, st.floats(0.2, 5.0)),
    (Additive, st.floats(-0.5, 0.5)),
    (AcceleratedTime, st.floats(0.3, 1.9)),
]


class TestDerivative:
    @pytest.mark.parametrize("family, values", FAMILIES)
    @pytest.mark.parametrize("model", [WEIBULL, ExcessHazardModel(WeibullBaseline(1.4, 0.3))], ids=["dec", "inc"])
    @given(data=st.data())
    def test_hazard_is_derivative_weibull(self, family, values, model, data):
        alt = family(data.draw(values))
        t = data.draw(st.floats(0.05, 4.0))
        lp = data.draw(st.floats(-1.0, 1.0))
        h = 1e-6
        fd = (alt.cumulative1(model, t + h, lp) - alt.cumulative1(model, t - h, lp)) / (2 * h)
        got = alt.hazard1(model, t, lp)
        # skip the kink where the additive truncation switches on
        if isinstance(alt, Additive) and abs(float(model.hazard(t, lp)) + alt.gamma) < 1e-3:
            return
        assert float(got) == pytest.approx(float(fd), rel=1e-5, abs=1e-8)

    @pytest.mark.parametrize("family, values", FAMILIES)
    @given(data=st.data())
    def test_hazard_is_derivative_piecewise(self, ref_model, family, values, data):
        alt = family(data.draw(values))
        model = ref_model.extended_to(20.0)
        t = data.draw(st.floats(0.05, 9.5))
        lp = data.draw(st.floats(-1.0, 1.0))
        knots = np.asarray(alt.drift_knots(model))
        if np.min(np.abs(knots - t)) < 1e-4:
            return
        h = 1e-6
        fd = (alt.cumulative1(model, t + h, lp) - alt.cumulative1(model, t - h, lp)) / (2 * h)
        assert float(alt.hazard1(model, t, lp)) == pytest.approx(float(fd), rel=1e-6, abs=1e-9)

    @pytest.mark.parametrize("family, values", FAMILIES)
    @given(data=st.data())
    def test_inverse(self, family, values, data):
        alt = family(data.draw(values))
        lp = data.draw(st.floats(-1.0, 1.0))
        t = data.draw(st.floats(0.01, 5.0))
        target = float(alt.cumulative1(WEIBULL, t, lp))
        if target <= 0:
            return
        back = float(alt.inverse1(WEIBULL, target, lp))
        assert float(alt.cumulative1(WEIBULL, back, lp)) == pytest.approx(target, rel=1e-9)


class TestEventTerm:
    def test_proportional(self):
        table = LifeTable.constant(0.01)
        got = llr_event_term(Proportional(2), flat(0.1), table, Z, NOX, 1.3)
        assert got == pytest.approx(math.log(0.21 / 0.11), rel=1e-14)
        assert got == pytest.approx(0.64663, abs=5e-6)

    def test_identity(self, ref_model, table):
        x = np.ones(len(ref_model.coefficients))
        assert llr_event_term(Proportional(1), ref_model, table, Z, x, 4.2) == 0.0

    def test_additive_truncated(self):
        table = LifeTable.constant(0.02)
        got = llr_event_term(Additive(-0.2), flat(0.1), table, Z, NOX, 2.0)
        assert got == pytest.approx(math.log(0.02 / 0.12), rel=1e-14)
        assert got == pytest.approx(-1.79176, abs=5e-6)

    def test_zero_hazard_event(self):
        with pytest.raises(ModelInconsistencyError):
            Proportional(2).event_term(flat(0.1), 1.0, -np.inf, 0.0)

    def test_truncated_with_zero_population_hazard_is_minus_inf(self):
        assert Additive(-0.3).event_term(flat(0.1), 1.0, 0.0, 0.0) == -np.inf


class TestDrift:
    def test_proportional(self):
        # H_E0(a) = 0.1 at a = 1
        assert llr_drift_term(Proportional(2), flat(0.1), Z, NOX, 1.0) == pytest.approx(-0.1, rel=1e-14)

    def test_additive(self):
        assert llr_drift_term(Additive(0.005), flat(0.1), Z, NOX, 2.0) == pytest.approx(-0.01, rel=1e-12)

    def test_accelerated(self):
        got = llr_drift_term(AcceleratedTime(2), WEIBULL, Z, NOX, 1.0)
        assert got == pytest.approx(-(0.25 * 2 ** 0.65 - 0.25), rel=1e-14)
        assert got == pytest.approx(-0.14229, abs=5e-6)

    @given(data=st.data())
    def test_identity_alternatives_vanish(self, ref_model, data):
        a = data.draw(st.floats(0.0, 10.0))
        lp = data.draw(st.floats(-3.0, 3.0))
        for alt in (Proportional(1.0), Additive(0.0), AcceleratedTime(1.0)):
            assert alt.is_identity
            assert float(alt.drift(ref_model, a, lp)) == 0.0
            assert float(alt.event_term(ref_model, a, lp, 0.01)) == 0.0


class TestUntruncatedAdditive:
    def test_closed_forms_on_random_draws(self, rng):
        # without active truncation the general terms equal -gamma A and log((hP + h0 + gamma) / (hP + h0))
        cuts, chi = [0, 1, 2, 3, 4, 5, 10], [-1.4, -1.6, -1.8, -2.0, -2.1, -3.0]
        model = ExcessHazardModel(PiecewiseBaseline(cuts, chi))
        worst = 0.0
        for _ in range(1000):
            lp = rng.uniform(-2, 2)
            a = rng.uniform(0, 10)
            hp = rng.uniform(0.0, 0.2)
            h0_min = math.exp(min(chi) + lp)
            gamma = rng.uniform(-0.99 * h0_min, 0.05) if rng.random() < 0.5 else rng.uniform(0, 0.05)
            alt = Additive(gamma)
            h0 = float(model.hazard(a, lp))
            worst = max(
                worst,
                abs(float(alt.drift(model, a, lp)) + gamma * a),
                abs(float(alt.event_term(model, a, lp, hp)) - math.log((hp + h0 + gamma) / (hp + h0))),
            )
        assert worst < 1e-12


class TestConstruction:
    def test_make(self):
        assert make_alternative("proportional", 0.8) == Proportional(0.8)
        assert make_alternative("gamma", -0.002) == Additive(-0.002)
        assert make_alternative("accelerated", 1.1) == AcceleratedTime(1.1)

    @pytest.mark.parametrize("kind, value", [("proportional", 0.0), ("accelerated", -1.0), ("quadratic", 1.0)])
    def test_invalid(self, kind, value):
        with pytest.raises(ValidationError):
            make_alternative(kind, value)

    def test_accelerated_support(self):
        assert AcceleratedTime(1.2).required_support(10.0) == pytest.approx(12.0)
        assert AcceleratedTime(0.8).required_support(10.0) == 10.0
