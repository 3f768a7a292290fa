import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import optimize
from scipy.sparse.csgraph import connected_components
from sklearn.exceptions import NotFittedError

from blocgravity import BaselineEconomy, BlocTaxonomy, Group, HatAlgebraEquilibrium, Shock, solve
from blocgravity._validation import ConfigurationError, ConvergenceError
from blocgravity.effects import series_from_estimates
from blocgravity.geq import report_volumes, report_welfare, shock_from_estimates
from blocgravity.synth import oracle_ge_levels, random_economy, two_bloc_economy

EPS, PSI = 5.03, 1.24


def random_shock(n, rng, lo=0.6, hi=1.4):
    t = rng.uniform(lo, hi, size=(n, n))
    np.fill_diagonal(t, 1.0)
    return Shock(t)


def hats(sol):
    return {k: getattr(sol, k) for k in ("p_hat", "P_hat", "w_hat", "Y_hat", "E_hat", "W_hat")}


def test_identity_shock_hats_are_one():
    base = random_economy(5, np.random.default_rng(0))
    sol = solve(base, Shock.identity(5), EPS, PSI)
    for v in hats(sol).values():
        np.testing.assert_allclose(v, 1.0, rtol=0, atol=1e-14)
    np.testing.assert_allclose(sol.X_prime, base.X, rtol=1e-14)
    assert sol.iterations == 0


def _two_country_direct(pi11, pi21, tau, eps):
    """Symmetric two-country benchmark solved as a two-equation system in (p2/p1, P1)."""
    # unknowns: relative price r = p2/p1 (with p1 = 1) and log P1
    X = np.array([[pi11, pi21], [pi21, pi11]])

    def eqs(z):
        r, logP = z
        p = np.array([1.0, r])
        t = np.array([[1.0, tau], [tau, 1.0]])
        P_neg = (X * (t * p[:, None]) ** (-eps)).sum(axis=0)
        Y = p  # psi = 0 keeps quantities fixed
        share = X * (t * p[:, None]) ** (-eps) / P_neg[None, :]
        demand = share @ (Y * X.sum(axis=0) / X.sum(axis=1))
        return [demand[0] / Y[0] - 1.0, math.log(P_neg[0]) * (-1 / eps) - logP]

    r, logP = optimize.fsolve(eqs, [1.0, 0.0], xtol=1e-14)
    return math.exp(logP), r


def test_symmetric_two_country_acr():
    X = np.array([[80.0, 20.0], [20.0, 80.0]])
    base = BaselineEconomy(("A", "B"), X)
    tau = 0.8
    sol = solve(base, Shock(np.array([[1.0, tau], [tau, 1.0]])), EPS, 0.0)
    lam_hat = np.diag(sol.X_prime) / sol.E_prime / (np.diag(X) / X.sum(axis=0))
    np.testing.assert_allclose(sol.W_hat, lam_hat ** (-1 / EPS), rtol=1e-10)
    assert sol.W_hat[0] == pytest.approx(sol.W_hat[1], rel=1e-12)
    P_direct, r = _two_country_direct(0.8, 0.2, tau, EPS)
    assert r == pytest.approx(1.0, abs=1e-10)
    assert sol.W_hat[0] == pytest.approx(1.0 / P_direct, rel=1e-9)
    closed = (0.8 + 0.2 * tau ** (-EPS)) ** (1 / EPS)
    assert sol.W_hat[0] == pytest.approx(closed, rel=1e-10)
    lev = oracle_ge_levels(base, Shock(np.array([[1.0, tau], [tau, 1.0]])), EPS, 0.0)
    np.testing.assert_allclose(lev.W_hat, sol.W_hat, rtol=1e-9)


def test_three_country_deficits_match_levels_oracle():
    X = np.array([[50.0, 8.0, 3.0], [12.0, 70.0, 6.0], [2.0, 9.0, 40.0]])
    base = BaselineEconomy(("A", "B", "C"), X)
    assert not np.allclose(base.E, base.Y)
    shock = Shock(np.array([[1.0, 0.7, 1.1], [0.9, 1.0, 0.8], [1.2, 0.75, 1.0]]))
    sol = solve(base, shock, EPS, PSI)
    lev = oracle_ge_levels(base, shock, EPS, PSI)
    for k, v in hats(sol).items():
        np.testing.assert_allclose(v, getattr(lev, k), rtol=1e-8, err_msg=k)
    np.testing.assert_allclose(sol.X_prime, lev.X_prime, rtol=1e-8)


def test_zero_expenditure_column_rejected():
    X = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="expenditure"):
        BaselineEconomy(("A", "B"), X)


def test_disconnected_trade_graph_rejected():
    X = np.diag([5.0, 3.0, 4.0])
    X[0, 1] = 1.0
    with pytest.raises(ValueError, match="disconnected"):
        solve(BaselineEconomy(("A", "B", "C"), X), Shock.identity(3), EPS, PSI)


def test_nonconvergence_reports_trace():
    base = random_economy(4, np.random.default_rng(1))
    with pytest.raises(ConvergenceError) as info:
        solve(base, random_shock(4, np.random.default_rng(2)), EPS, PSI, max_iter=3)
    assert len(info.value.trace) == 4


def test_shock_validation():
    with pytest.raises(ValueError):
        Shock(np.array([[1.0, 0.5], [0.5, 2.0]]))
    with pytest.raises(ValueError):
        Shock(np.array([[1.0, -0.5], [0.5, 1.0]]))
    with pytest.raises(ConfigurationError):
        solve(random_economy(3, np.random.default_rng(0)), Shock.identity(3), EPS, PSI, damping=0.0)


# -- shocks from estimates ------------------------------------------------------------------

TAX = BlocTaxonomy({"E1": Group.EAST, "E2": Group.EAST, "W1": Group.WEST})
COUNTRIES = ("E1", "E2", "W1", "R1")


def test_zero_theta_is_identity_shock():
    s = series_from_estimates("IC", [1960], [0.0], [0.01])
    shock = shock_from_estimates({"IC": s}, COUNTRIES, TAX, 1960)
    assert (shock.tau_hat == 1.0).all()


def test_peak_theta_gives_inverse_tariff_factor():
    theta = -EPS * math.log(1.48)
    shock = shock_from_estimates({"IC": {1951: theta}}, COUNTRIES, TAX, 1951, epsilon=EPS)
    t = shock.tau_hat
    for i, j in [(0, 2), (1, 2), (2, 0), (2, 1)]:
        assert t[i, j] == pytest.approx(1 / 1.48, rel=1e-14)
    assert t[0, 1] == 1.0 and t[0, 3] == 1.0 and t[3, 2] == 1.0


def test_directional_mode_is_asymmetric():
    shock = shock_from_estimates({"EW": {1960: -1.0}, "WE": {1960: -0.4}}, COUNTRIES, TAX, 1960, mode="EW+WE")
    t = shock.tau_hat
    assert t[0, 2] == pytest.approx(math.exp(-1.0 / EPS))
    assert t[2, 0] == pytest.approx(math.exp(-0.4 / EPS))
    assert not np.allclose(t, t.T)


def test_missing_year_raises():
    s = series_from_estimates("IC", [1960], [-1.0], [0.01])
    with pytest.raises(KeyError):
        shock_from_estimates({"IC": s}, COUNTRIES, TAX, 1961)
    with pytest.raises(ConfigurationError):
        shock_from_estimates({"IC": s}, COUNTRIES, TAX, 1960, mode="other")


# -- reporting ----------------------------------------------------------------------------

def test_identity_reports_zero_changes():
    base, tax = two_bloc_economy(seed=1)
    sol = solve(base, Shock.identity(len(base.countries)), EPS, PSI)
    assert report_volumes(base, sol, tax)[2] == pytest.approx(0.0, abs=1e-10)
    assert report_volumes(base, sol, tax, "world")[2] == pytest.approx(0.0, abs=1e-10)
    w = report_welfare(sol)
    assert np.allclose(w.per_country, 0.0, atol=1e-10) and w.median == pytest.approx(0.0, abs=1e-10)


def test_peak_barrier_removal_volume_bounds():
    base, tax = two_bloc_economy(te_ic=48.0)
    shock = shock_from_estimates({"IC": {1951: -EPS * math.log(1.48)}}, base.countries, tax, 1951)
    sol = solve(base, shock, EPS, PSI)
    _, _, pct = report_volumes(base, sol, tax)
    bound = 100 * (1.48 ** 5.03 - 1)
    assert bound == pytest.approx(619.0, abs=1.0)
    assert 100 < pct < bound


def test_late_barrier_removal_world_trade_and_welfare():
    base, tax = two_bloc_economy(te_ic=25.0)
    shock = shock_from_estimates({"IC": {1980: -EPS * math.log(1.25)}}, base.countries, tax, 1980)
    sol = solve(base, shock, EPS, PSI)
    _, _, world = report_volumes(base, sol, tax, "world")
    assert 0 < world < 10
    east = tax.members(Group.EAST, base.countries)
    w = report_welfare(sol, base.population, members=east, weighted=True)
    assert 0 < w.median < 3
    assert w.weighted_mean is not None and 0 < w.weighted_mean < 3


def test_weighted_welfare_needs_population():
    base = random_economy(3, np.random.default_rng(0))
    sol = solve(base, Shock.identity(3), EPS, PSI)
    with pytest.raises(ValueError):
        report_welfare(sol, weighted=True)


def test_country_table_columns():
    base = random_economy(3, np.random.default_rng(0))
    sol = solve(base, random_shock(3, np.random.default_rng(3)), EPS, PSI)
    assert list(sol.country_table().columns) == ["country", "p_hat", "P_hat", "w_hat", "W_hat_pct"]


def test_estimator_wrapper():
    base = random_economy(4, np.random.default_rng(5))
    model = HatAlgebraEquilibrium(psi=0.5)
    with pytest.raises(NotFittedError):
        model.predict(Shock.identity(4))
    shock = random_shock(4, np.random.default_rng(6))
    got = model.fit(base).predict(shock)
    ref = solve(base, shock, EPS, 0.5)
    np.testing.assert_allclose(got.W_hat, ref.W_hat, rtol=1e-14)
    raw = HatAlgebraEquilibrium().fit(np.asarray(base.X)).predict(shock.tau_hat)
    assert raw.countries == ("C0", "C1", "C2", "C3")


# -- properties ------------------------------------------------------------------------------

instances = st.tuples(st.integers(2, 7), st.integers(0, 2 ** 31 - 1), st.booleans(), st.sampled_from([0.0, 0.3]),
                      st.sampled_from([0.0, 0.5, PSI, 3.0]))


def make(n, seed, deficits, zeros):
    rng = np.random.default_rng(seed)
    base = random_economy(n, rng, deficits=deficits, zero_share=zeros)
    assume(connected_components(base.X > 0, directed=True, connection="weak")[0] == 1)
    return base, random_shock(n, rng)


@settings(max_examples=40, deadline=None)
@given(instances)
def test_equilibrium_invariants(inst):
    n, seed, deficits, zeros, psi = inst
    base, shock = make(n, seed, deficits, zeros)
    sol = solve(base, shock, EPS, psi)
    Xp = sol.X_prime
    for v in hats(sol).values():
        assert np.all(v > 0)
    assert np.all(Xp >= 0) and np.all(Xp[base.X == 0] == 0)
    assert np.max(np.abs(Xp.sum(axis=1) / sol.Y_prime - 1)) < 1e-10
    assert abs(sol.E_prime.sum() / sol.Y_prime.sum() - 1) < 1e-10
    np.testing.assert_allclose(sol.W_hat, (sol.p_hat / sol.P_hat) ** (1 + psi), rtol=1e-12)
    np.testing.assert_allclose(sol.W_hat, sol.w_hat / sol.P_hat, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(instances, st.floats(1e-3, 1e3))
def test_homogeneity_in_baseline_scale(inst, k):
    n, seed, deficits, zeros, psi = inst
    base, shock = make(n, seed, deficits, zeros)
    a = solve(base, shock, EPS, psi)
    b = solve(BaselineEconomy(base.countries, base.X * k), shock, EPS, psi)
    for key, v in hats(a).items():
        np.testing.assert_allclose(hats(b)[key], v, rtol=1e-8, err_msg=key)


@settings(max_examples=25, deadline=None)
@given(instances)
def test_numeraire_invariance(inst):
    n, seed, deficits, zeros, psi = inst
    base, shock = make(n, seed, deficits, zeros)
    a = solve(base, shock, EPS, psi)
    b = solve(base, shock, EPS, psi, numeraire=n - 1)
    assert b.p_hat[n - 1] == pytest.approx(1.0, rel=1e-14)
    np.testing.assert_allclose(b.W_hat, a.W_hat, rtol=1e-8)
    np.testing.assert_allclose(b.X_prime / b.X_prime.sum(), a.X_prime / a.X_prime.sum(), rtol=1e-8, atol=1e-300)
    tax = BlocTaxonomy({base.countries[0]: Group.EAST, base.countries[-1]: Group.WEST})
    assert report_volumes(base, b, tax, "world")[2] == pytest.approx(report_volumes(base, a, tax, "world")[2],
                                                                     rel=1e-7, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(instances)
def test_acr_when_supply_is_inelastic(inst):
    n, seed, deficits, zeros, _ = inst
    base, shock = make(n, seed, deficits, zeros)
    sol = solve(base, shock, EPS, 0.0)
    lam0 = np.diag(base.X) / base.E
    lam1 = np.diag(sol.X_prime) / sol.E_prime
    np.testing.assert_allclose(sol.W_hat, (lam1 / lam0) ** (-1 / EPS), rtol=1e-8)
