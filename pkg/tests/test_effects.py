import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from blocgravity._validation import ConfigurationError
from blocgravity.effects import (
    DEFAULT_EPSILON,
    NORMAL_95,
    TariffEquivalent,
    series_from_estimates,
    tariff_equivalent,
    tariff_se_delta,
    theta_from_tariff,
)

EPS = 5.03


def fd_se(theta, var, eps, h=1e-6):
    """Finite-difference propagation oracle."""
    f = lambda t: 100.0 * (math.exp(-t / eps) - 1.0)  # noqa: E731
    return abs((f(theta + h) - f(theta - h)) / (2 * h)) * math.sqrt(var)


def test_defaults():
    assert DEFAULT_EPSILON == 5.03
    assert NORMAL_95 == 1.959964


def test_te_of_zero_is_exactly_zero():
    assert tariff_equivalent(0.0, EPS) == 0.0
    assert math.copysign(1.0, tariff_equivalent(0.0, EPS)) == 1.0


def test_te_doubling():
    assert tariff_equivalent(-EPS * math.log(2), EPS) == pytest.approx(100.0, abs=1e-10)


def test_te_peak_value():
    # theta from inverting the transform at a 48 percent tariff
    theta = -EPS * math.log(1.48)
    assert theta == pytest.approx(-1.9722, abs=5e-4)
    assert tariff_equivalent(-1.9722, EPS) == pytest.approx(48.0, abs=0.1)
    assert theta_from_tariff(48.0, EPS) == pytest.approx(theta, rel=1e-14)


def test_te_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        tariff_equivalent(0.1, 0.0)
    with pytest.raises(ValueError):
        tariff_se_delta(0.1, 0.1, -1.0)


def test_se_zero_variance():
    assert tariff_se_delta(0.0, 0.0, EPS) == 0.0


def test_se_at_zero_with_variance_eps_squared():
    assert tariff_se_delta(0.0, 25.3009, EPS) == pytest.approx(100.0, rel=1e-12)


def test_se_matches_finite_difference():
    assert tariff_se_delta(-1.0, 0.04, EPS) == pytest.approx(fd_se(-1.0, 0.04, EPS), rel=1e-6)


def test_se_negative_variance_rejected():
    with pytest.raises(ValueError):
        tariff_se_delta(0.0, -1e-3, EPS)


@pytest.mark.parametrize("theta", np.linspace(-5, 1, 61))
def test_se_grid_against_finite_difference(theta):
    assert tariff_se_delta(theta, 0.09, EPS) == pytest.approx(fd_se(theta, 0.09, EPS), rel=1e-6)


@settings(max_examples=300, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 20))
def test_te_monotone_decreasing_and_sign(a, b, eps):
    ta, tb = tariff_equivalent(a, eps), tariff_equivalent(b, eps)
    if a < b:
        assert ta >= tb
    assert ta > -100
    assert (a < 0) == (ta > 0)
    assert (a == 0) == (ta == 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 4))
def test_se_finite_difference_property(theta, var):
    assert tariff_se_delta(theta, var, EPS) == pytest.approx(fd_se(theta, var, EPS), rel=1e-6, abs=1e-12)


def test_series_constant_zero_is_flat_zero():
    s = series_from_estimates("IC", [1950, 1951, 1952], [0.0, 0.0, 0.0], [0.1, 0.1, 0.1])
    assert (s.table["te"] == 0).all()
    assert (s.table["te_lo"] <= s.table["te"]).all() and (s.table["te_hi"] >= s.table["te"]).all()


def test_series_with_gaps_keeps_gaps():
    s = series_from_estimates("YE", [1950, 1953, 1960], [-0.5, -0.4, -0.2], [0.01, 0.01, 0.02])
    assert s.years == [1950, 1953, 1960]
    out = s.to_frame()
    assert list(out.columns) == ["label", "year", "theta", "theta_se", "te", "te_se", "te_lo", "te_hi"]


def test_series_ci_uses_normal_quantile():
    s = series_from_estimates("IC", [1950], [-1.0], [0.04])
    row = s.table.loc[1950]
    assert row["te_hi"] - row["te"] == pytest.approx(NORMAL_95 * row["te_se"], rel=1e-14)


def test_transformer_round_trip():
    tr = TariffEquivalent(EPS)
    with pytest.raises(NotFittedError):
        tr.transform([0.0])
    tr.fit()
    x = np.array([-2.0, -0.3, 0.0, 0.7])
    np.testing.assert_allclose(tr.inverse_transform(tr.transform(x)), x, rtol=1e-13, atol=1e-15)
    assert tr.get_params() == {"epsilon": EPS}
    with pytest.raises(ConfigurationError):
        TariffEquivalent(0.0).fit()
