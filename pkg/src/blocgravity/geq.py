"""Counterfactual equilibria of a universal-gravity trade model by exact hat algebra.

Production is roundabout (labor plus a bundle of all goods), so output
responds to the terms of trade with supply elasticity ``psi``. Demand is CES
across origins with trade elasticity ``epsilon``; trade imbalances are held
fixed through country-specific deficit parameters.

All changes are solved in ratios relative to a baseline flow matrix, with the
nominal normalisation that world output is unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, ConvergenceError, check_nonnegative, check_positive, \
    check_square_nonnegative
from .datamodel import BlocTaxonomy, Group
from .effects import DEFAULT_EPSILON, TariffSeries

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_PSI",
    "BaselineEconomy",
    "Shock",
    "CounterfactualSolution",
    "solve",
    "HatAlgebraEquilibrium",
    "shock_from_estimates",
    "report_volumes",
    "report_welfare",
    "WelfareReport",
]

DEFAULT_PSI = 1.24


@dataclass(frozen=True)
class BaselineEconomy:
    """Observed flows ``X[i, j]`` from exporter ``i`` to importer ``j``, domestic on the diagonal."""

    countries: tuple[str, ...]
    X: np.ndarray
    population: np.ndarray | None = None

    def __post_init__(self):
        X = check_square_nonnegative(self.X, "baseline flows")
        countries = tuple(self.countries)
        if len(countries) != X.shape[0] or len(set(countries)) != len(countries):
            raise ValueError("countries must be unique and match the flow matrix")
        Y, E = X.sum(axis=1), X.sum(axis=0)
        if np.any(E <= 0):
            bad = [countries[k] for k in np.flatnonzero(E <= 0)]
            raise ValueError(f"expenditure shares undefined (zero column) for {bad}")
        if np.any(Y <= 0):
            bad = [countries[k] for k in np.flatnonzero(Y <= 0)]
            raise ValueError(f"zero output for {bad}")
        X = X.copy()
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "countries", countries)
        if self.population is not None:
            pop = np.asarray(self.population, dtype=float)
            if pop.shape != Y.shape or np.any(pop < 0):
                raise ValueError("population must be non-negative, one entry per country")
            object.__setattr__(self, "population", pop)

    @property
    def Y(self) -> np.ndarray:
        return self.X.sum(axis=1)

    @property
    def E(self) -> np.ndarray:
        return self.X.sum(axis=0)

    @property
    def pi(self) -> np.ndarray:
        return self.X / self.E[None, :]

    @property
    def xi(self) -> np.ndarray:
        """Deficit parameters, calibrated so the baseline is an equilibrium (normaliser equal to one)."""
        return self.E / self.Y

    @classmethod
    def from_frame(cls, flows: pd.DataFrame, countries: Sequence[str] | None = None,
                   population: Mapping[str, float] | None = None) -> "BaselineEconomy":
        """Build from long ``exporter, importer, value`` rows; absent pairs are zero."""
        if countries is None:
            countries = sorted(set(flows["exporter"]) | set(flows["importer"]))
        idx = {c: k for k, c in enumerate(countries)}
        X = np.zeros((len(countries), len(countries)))
        for e, m, v in zip(flows["exporter"], flows["importer"], flows["value"]):
            if e in idx and m in idx:
                X[idx[e], idx[m]] += v
        pop = None if population is None else np.array([population[c] for c in countries], dtype=float)
        return cls(tuple(countries), X, pop)


@dataclass(frozen=True)
class Shock:
    """Proportional changes in iceberg costs; ``tau_hat[i, i]`` must be one."""

    tau_hat: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tau_hat, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("tau_hat must be square")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("tau_hat entries must be finite and positive")
        if not np.allclose(np.diag(t), 1.0, rtol=0, atol=1e-15):
            raise ValueError("domestic trade costs cannot change (tau_hat[i, i] == 1)")
        object.__setattr__(self, "tau_hat", t)

    @classmethod
    def identity(cls, n: int) -> "Shock":
        return cls(np.ones((n, n)))


@dataclass(frozen=True)
class CounterfactualSolution:
    countries: tuple[str, ...]
    p_hat: np.ndarray
    P_hat: np.ndarray
    w_hat: np.ndarray
    Y_hat: np.ndarray
    E_hat: np.ndarray
    X_prime: np.ndarray
    W_hat: np.ndarray
    iterations: int
    residual: float
    epsilon: float
    psi: float
    residual_trace: list = field(default_factory=list, repr=False)

    @property
    def Y_prime(self) -> np.ndarray:
        return self.X_prime.sum(axis=1)

    @property
    def E_prime(self) -> np.ndarray:
        return self.X_prime.sum(axis=0)

    def country_table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "country": list(self.countries),
            "p_hat": self.p_hat,
            "P_hat": self.P_hat,
            "w_hat": self.w_hat,
            "W_hat_pct": 100.0 * (self.W_hat - 1.0),
        })


def _equilibrium_objects(p, pi, tau_eps, Y, xi, eps, psi):
    a = pi * tau_eps * p[:, None] ** (-eps)
    P_neg = a.sum(axis=0)
    P = P_neg ** (-1.0 / eps)
    Yp = Y * p ** (1.0 + psi) * P ** (-psi)
    Ep = Yp.sum() / (xi * Yp).sum() * xi * Yp
    Xp = a / P_neg[None, :] * Ep[None, :]
    return P, Yp, Ep, Xp


def solve(
    base: BaselineEconomy,
    shock: Shock,
    epsilon: float = DEFAULT_EPSILON,
    psi: float = DEFAULT_PSI,
    *,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 20000,
    numeraire: int | None = None,
) -> CounterfactualSolution:
    """Solve for the equilibrium changes caused by ``shock``.

    Prices are updated multiplicatively by excess demand raised to
    ``damping / (1 + epsilon + psi)``. By default the price level is pinned by
    keeping world output at its baseline value; passing ``numeraire`` fixes
    that country's export price change at one instead.
    """
    eps = check_positive(epsilon, "epsilon")
    psi = check_nonnegative(psi, "psi")
    if not 0 < damping <= 1:
        raise ConfigurationError("damping must lie in (0, 1]")
    tau = shock.tau_hat
    n = len(base.countries)
    if tau.shape != (n, n):
        raise ValueError(f"shock is {tau.shape}, economy has {n} countries")

    n_comp, labels = connected_components(base.X > 0, directed=True, connection="weak")
    if n_comp > 1:
        # a global output normaliser cannot balance separate trading blocks with fixed deficits
        groups = [[base.countries[k] for k in np.flatnonzero(labels == c)] for c in range(n_comp)]
        raise ValueError(f"trade graph splits into disconnected blocks: {groups}")

    pi, Y, xi = base.pi, base.Y, base.xi
    tau_eps = tau ** (-eps)
    step = damping / (1.0 + eps + psi)
    world = Y.sum()
    p = np.ones(n)
    trace = []
    for it in range(max_iter + 1):
        P, Yp, Ep, Xp = _equilibrium_objects(p, pi, tau_eps, Y, xi, eps, psi)
        # the system is homogeneous of degree one in p
        c = world / Yp.sum() if numeraire is None else 1.0 / p[numeraire]
        p, P, Yp, Ep, Xp = p * c, P * c, Yp * c, Ep * c, Xp * c
        D = Xp.sum(axis=1)
        excess = D / Yp - 1.0
        resid = float(np.max(np.abs(excess)))
        trace.append(resid)
        if resid < tol:
            break
        if it == max_iter or not np.isfinite(resid):
            raise ConvergenceError(f"hat-algebra iteration stalled at residual {resid:.3e}", trace)
        p = p * (D / Yp) ** step

    zeta = 1.0 / (1.0 + psi)
    w_hat = (p * P ** (-(1.0 - zeta))) ** (1.0 / zeta)
    W_hat = (p / P) ** (1.0 + psi)
    return CounterfactualSolution(
        countries=base.countries,
        p_hat=p,
        P_hat=P,
        w_hat=w_hat,
        Y_hat=Yp / Y,
        E_hat=Ep / base.E,
        X_prime=Xp,
        W_hat=W_hat,
        iterations=it,
        residual=resid,
        epsilon=eps,
        psi=psi,
        residual_trace=trace,
    )


class HatAlgebraEquilibrium(BaseEstimator):
    """Estimator-style wrapper: ``fit`` takes the baseline, ``predict`` solves a shock."""

    def __init__(self, epsilon: float = DEFAULT_EPSILON, psi: float = DEFAULT_PSI, damping: float = 0.5,
                 tol: float = 1e-10, max_iter: int = 20000):
        self.epsilon = epsilon
        self.psi = psi
        self.damping = damping
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, countries=None, population=None):
        if isinstance(X, BaselineEconomy):
            self.base_ = X
        else:
            X = np.asarray(X, dtype=float)
            countries = tuple(countries) if countries is not None else tuple(f"C{k}" for k in range(X.shape[0]))
            self.base_ = BaselineEconomy(countries, X, population)
        return self

    def predict(self, shock) -> CounterfactualSolution:
        check_is_fitted(self, "base_")
        if not isinstance(shock, Shock):
            shock = Shock(np.asarray(shock, dtype=float))
        return solve(self.base_, shock, self.epsilon, self.psi, damping=self.damping, tol=self.tol,
                     max_iter=self.max_iter)


def _theta_at(source, year: int) -> float:
    if isinstance(source, TariffSeries):
        table = source.table
        if year not in table.index:
            raise KeyError(f"no {source.label} estimate for {year}")
        return float(table.loc[year, "theta"])
    if isinstance(source, Mapping):
        if year not in source:
            raise KeyError(f"no estimate for {year}")
        return float(source[year])
    series = pd.Series(source)
    if year not in series.index:
        raise KeyError(f"no estimate for {year}")
    return float(series.loc[year])


def shock_from_estimates(
    series: Mapping[str, object],
    countries: Sequence[str],
    taxonomy: BlocTaxonomy,
    year: int,
    mode: str = "IC",
    epsilon: float = DEFAULT_EPSILON,
) -> Shock:
    """Shock that removes the estimated cross-bloc trade cost in ``year``.

    ``series`` maps dummy labels to :class:`TariffSeries` (or year-indexed
    coefficients). ``mode="IC"`` applies the ``IC`` estimate to both
    directions; ``mode="EW+WE"`` uses ``EW`` for East-to-West flows and ``WE``
    for the reverse.
    """
    eps = check_positive(epsilon, "epsilon")
    groups = [taxonomy.resolve(c) for c in countries]
    if mode == "IC":
        th = _theta_at(series["IC"], year)
        th_ew = th_we = th
    elif mode == "EW+WE":
        th_ew = _theta_at(series["EW"], year)
        th_we = _theta_at(series["WE"], year)
    else:
        raise ConfigurationError(f"unknown shock mode {mode!r}")
    n = len(countries)
    tau = np.ones((n, n))
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            if i == j:
                continue
            if gi is Group.EAST and gj is Group.WEST:
                tau[i, j] = np.exp(th_ew / eps)
            elif gi is Group.WEST and gj is Group.EAST:
                tau[i, j] = np.exp(th_we / eps)
    return Shock(tau)


def _pair_mask(countries, taxonomy, scope) -> np.ndarray:
    n = len(countries)
    off = ~np.eye(n, dtype=bool)
    if scope == "world":
        return off
    if scope == "inter_bloc":
        g = [taxonomy.resolve(c) for c in countries]
        east = np.array([x is Group.EAST for x in g])
        west = np.array([x is Group.WEST for x in g])
        return off & ((east[:, None] & west[None, :]) | (west[:, None] & east[None, :]))
    raise ConfigurationError(f"unknown scope {scope!r}")


def report_volumes(base: BaselineEconomy, solution: CounterfactualSolution, taxonomy: BlocTaxonomy,
                   scope: str = "inter_bloc") -> tuple[float, float, float]:
    """``(actual, counterfactual, percent change)`` of the summed flows in ``scope``.

    The counterfactual is expressed in baseline world-output units, so the
    result does not depend on the price normalisation.
    """
    mask = _pair_mask(base.countries, taxonomy, scope)
    actual = float(base.X[mask].sum())
    cf = float(solution.X_prime[mask].sum()) * base.Y.sum() / solution.Y_prime.sum()
    pct = 100.0 * (cf / actual - 1.0) if actual > 0 else float("nan")
    return actual, cf, pct


@dataclass(frozen=True)
class WelfareReport:
    per_country: pd.Series  # percent change
    median: float
    weighted_mean: float | None


def report_welfare(solution: CounterfactualSolution, population=None, members: Sequence[str] | None = None,
                   weighted: bool = False) -> WelfareReport:
    """Welfare changes in percent, their median and (optionally) population-weighted mean."""
    pct = pd.Series(100.0 * (solution.W_hat - 1.0), index=list(solution.countries), name="W_hat_pct")
    if members is not None:
        pct = pct.loc[[c for c in solution.countries if c in set(members)]]
    wmean = None
    if weighted or population is not None:
        if population is None:
            raise ValueError("population weights are required for the weighted mean")
        pop = pd.Series(np.asarray(population, dtype=float), index=list(solution.countries)).loc[pct.index]
        if pop.sum() <= 0:
            raise ValueError("population weights sum to zero")
        wmean = float((pct * pop).sum() / pop.sum())
    med = float(pct.median()) if len(pct) else float("nan")
    return WelfareReport(pct, med, wmean)
