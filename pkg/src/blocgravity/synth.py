"""Synthetic gravity worlds and brute-force reference solvers.

The reference solvers share no code with the estimator or the hat-algebra
solver: the Poisson oracle runs Newton's method on the explicit
dummy-variable likelihood, and the equilibrium oracle solves the model in
levels with a generic root finder before forming ratios.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import optimize

from ._validation import ConfigurationError, ConvergenceError, SingularHessianError
from .datamodel import DUMMY_PRESETS, PAIR_COVARIATES, BlocTaxonomy, GravityDesign, Group, Panel
from .effects import DEFAULT_EPSILON, theta_from_tariff

__all__ = [
    "WorldConfig",
    "generate",
    "OracleFit",
    "oracle_poisson_full_dummy",
    "oracle_poisson_design",
    "oracle_ge_levels",
    "random_economy",
    "two_bloc_economy",
]

_PREFIX = {
    Group.EAST: "E",
    Group.WEST: "W",
    Group.WEST_LEANING: "L",
    Group.NEUTRAL: "N",
    Group.YUGOSLAVIA: "Y",
    Group.REST_OF_WORLD: "R",
}


@dataclass(frozen=True)
class WorldConfig:
    """Parameters of a synthetic panel drawn from the baseline gravity equation.

    ``theta`` maps dummy labels of the ``dummies`` preset to a scalar or a
    per-year path; ``te_path`` is a convenience that sets ``theta["IC"]`` from
    tariff equivalents in percent. ``noise`` is ``"none"`` or
    ``"multiplicative"`` (mean-one lognormal with log-sd ``noise_sd``).
    """

    n_east: int = 3
    n_west: int = 3
    n_rest: int = 2
    n_west_leaning: int = 0
    n_neutral: int = 0
    n_yugoslavia: int = 0
    years: tuple[int, ...] = (1948, 1949)
    dummies: str = "baseline"
    theta: Mapping[str, object] = field(default_factory=lambda: {"IC": -1.0})
    te_path: Sequence[float] | None = None
    epsilon: float = DEFAULT_EPSILON
    gamma: object = -2.0
    beta: Mapping[str, float] = field(default_factory=lambda: {
        "log_distance": -0.8, "common_language": 0.3, "contiguous": 0.5, "colonial": 0.2})
    fe_mean: float = 8.0
    fe_sd: float = 1.0
    noise: str = "none"
    noise_sd: float = 0.5
    zero_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise not in ("none", "multiplicative"):
            raise ConfigurationError(f"unknown noise {self.noise!r}")
        if self.dummies not in DUMMY_PRESETS:
            raise ConfigurationError(f"unknown dummy preset {self.dummies!r}")
        if not 0 <= self.zero_rate < 1:
            raise ConfigurationError("zero_rate must lie in [0, 1)")
        years = tuple(int(t) for t in self.years)
        if list(years) != list(range(years[0], years[0] + len(years))):
            raise ConfigurationError("years must be a contiguous increasing range")
        object.__setattr__(self, "years", years)
        if self.te_path is not None:
            if len(self.te_path) != len(years):
                raise ConfigurationError("te_path needs one value per year")
            theta = dict(self.theta)
            theta["IC"] = [float(v) for v in theta_from_tariff(np.asarray(self.te_path, float), self.epsilon)]
            object.__setattr__(self, "theta", theta)

    @classmethod
    def from_json(cls, text: str) -> "WorldConfig":
        data = json.loads(text)
        if "years" in data and isinstance(data["years"], list) and len(data["years"]) == 2 \
                and data.get("years_as_range", True):
            lo, hi = data.pop("years")
            data["years"] = tuple(range(int(lo), int(hi) + 1))
        data.pop("years_as_range", None)
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def countries(self) -> list[str]:
        out = []
        for g, n in self._group_counts():
            out += [f"{_PREFIX[g]}{k + 1:02d}" for k in range(n)]
        return out

    def _group_counts(self):
        return [(Group.EAST, self.n_east), (Group.WEST, self.n_west), (Group.WEST_LEANING, self.n_west_leaning),
                (Group.NEUTRAL, self.n_neutral), (Group.YUGOSLAVIA, self.n_yugoslavia),
                (Group.REST_OF_WORLD, self.n_rest)]

    def taxonomy(self) -> BlocTaxonomy:
        assignments = {}
        for g, n in self._group_counts():
            if g is Group.REST_OF_WORLD:
                continue
            for k in range(n):
                assignments[f"{_PREFIX[g]}{k + 1:02d}"] = g
        return BlocTaxonomy(assignments)

    def path(self, value, label: str) -> np.ndarray:
        arr = np.broadcast_to(np.asarray(value, dtype=float), (len(self.years),)).copy()
        if arr.shape != (len(self.years),):
            raise ConfigurationError(f"{label} path must have one value per year")
        return arr


def _pair_design(countries: list[str], rng: np.random.Generator) -> pd.DataFrame:
    n = len(countries)
    xy = rng.uniform(0, 3000, size=(n, 2))
    dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    internal = rng.uniform(30, 200, size=n)
    dist[np.diag_indices(n)] = internal
    iu = np.triu_indices(n, 1)

    def sym_binary(p):
        m = np.zeros((n, n))
        draw = (rng.uniform(size=len(iu[0])) < p).astype(float)
        if n > 2 and len(draw) > 1:
            draw[0], draw[-1] = 1.0, 0.0  # keep variation across international pairs
        m[iu] = draw
        return m + m.T

    lang = sym_binary(0.2)
    colonial = sym_binary(0.1)
    contig = np.zeros((n, n))
    if n > 1:
        off = dist + np.diag(np.full(n, np.inf))
        ranked = np.argsort(off[iu])
        contig_pairs = ranked[: max(1, len(ranked) // 6)]
        contig[iu[0][contig_pairs], iu[1][contig_pairs]] = 1
        contig = contig + contig.T
    lang[np.diag_indices(n)] = 1.0
    rows = []
    for a in range(n):
        for b in range(n):
            rows.append((countries[a], countries[b], float(np.log(dist[a, b])), lang[a, b], contig[a, b],
                         colonial[a, b]))
    return pd.DataFrame(rows, columns=["exporter", "importer", *PAIR_COVARIATES])


def generate(config: WorldConfig) -> Panel:
    """Draw a panel with all directed pairs and domestic flows for every year.

    Dummy columns from ``config.dummies`` are attached to the design so the
    panel can be fitted directly.
    """
    rng = np.random.default_rng(config.seed)
    countries = config.countries
    n, T = len(countries), len(config.years)
    design_frame = _pair_design(countries, rng)
    taxonomy = config.taxonomy()
    design = GravityDesign.from_frame(design_frame).with_dummies(taxonomy, DUMMY_PRESETS[config.dummies])
    tab = design.table

    phi = rng.normal(config.fe_mean / 2, config.fe_sd, size=(n, T))
    psi = rng.normal(config.fe_mean / 2, config.fe_sd, size=(n, T))
    gamma = config.path(config.gamma, "gamma")
    thetas = {lab: config.path(v, lab) for lab, v in config.theta.items()}
    unknown = set(thetas) - set(design.dummy_labels)
    if unknown:
        raise ConfigurationError(f"theta given for labels outside the preset: {sorted(unknown)}")

    pair_index = [(a, b) for a in countries for b in countries]
    Z = tab.loc[pair_index]
    zb = sum(float(config.beta.get(c, 0.0)) * Z[c].to_numpy() for c in PAIR_COVARIATES)
    border = Z["border"].to_numpy()
    pos = {c: k for k, c in enumerate(countries)}
    ei = np.array([pos[a] for a, _ in pair_index])
    ij = np.array([pos[b] for _, b in pair_index])

    records = []
    for t_idx, year in enumerate(config.years):
        eta = gamma[t_idx] * border + phi[ei, t_idx] + psi[ij, t_idx] + zb
        for lab, path in thetas.items():
            eta = eta + path[t_idx] * Z[lab].to_numpy()
        mean = np.exp(eta)
        if config.noise == "multiplicative":
            s = config.noise_sd
            mean = mean * np.exp(rng.normal(-0.5 * s * s, s, size=mean.shape))
        if config.zero_rate > 0:
            zero = (rng.uniform(size=mean.shape) < config.zero_rate) & (border == 1)
            mean = np.where(zero, 0.0, mean)
        for (a, b), v in zip(pair_index, mean):
            records.append((a, b, year, float(v), "SYNTH"))
    rec = pd.DataFrame(records, columns=["exporter", "importer", "year", "value", "source"])

    # auxiliary series consistent with the flows: gdp = total sales, exports = international sales
    intl = rec[rec["exporter"] != rec["importer"]].groupby(["exporter", "year"])["value"].sum()
    tot = rec.groupby(["exporter", "year"])["value"].sum()
    aux = pd.DataFrame({"gdp": tot, "total_exports": intl}).reset_index().rename(columns={"exporter": "country"})
    population = dict(zip(countries, rng.uniform(1, 80, size=n)))
    aux["population"] = aux["country"].map(population)
    return Panel(rec, design, (config.years[0], config.years[-1]), aux=aux)


# ---------------------------------------------------------------------------
# Poisson oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleFit:
    coefficients: pd.Series  # regressor coefficients only
    all_coefficients: np.ndarray
    hessian: np.ndarray
    X: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    n_regressors: int
    iterations: int


def oracle_poisson_full_dummy(panel, time_varying=("border", "IC"), pooled=PAIR_COVARIATES,
                              include_domestic: bool = True, max_rows: int = 2000,
                              max_params: int = 200) -> OracleFit:
    """Newton-Raphson on the Poisson log-likelihood with explicit fixed-effect dummies.

    Exporter-year dummies are all kept; the first importer (alphabetically) of
    each year is the omitted importer-year category.
    """
    frame = panel.to_frame(include_domestic=include_domestic) if isinstance(panel, Panel) else panel
    frame = frame.reset_index(drop=True)
    if len(frame) > max_rows:
        raise ValueError(f"oracle limited to {max_rows} rows")
    y = frame["value"].to_numpy(float)
    years = sorted(frame["year"].unique())
    cols, names = [], []
    for lab in time_varying:
        for t in years:
            cols.append(frame[lab].to_numpy(float) * (frame["year"].to_numpy() == t))
            names.append(f"{lab}[{t}]")
    for lab in pooled:
        cols.append(frame[lab].to_numpy(float))
        names.append(lab)
    k = len(cols)
    for t in years:
        yr = frame["year"].to_numpy() == t
        for c in sorted(frame.loc[yr, "exporter"].unique()):
            cols.append((yr & (frame["exporter"].to_numpy() == c)).astype(float))
        for c in sorted(frame.loc[yr, "importer"].unique())[1:]:
            cols.append((yr & (frame["importer"].to_numpy() == c)).astype(float))
    X = np.column_stack(cols)
    if X.shape[1] > max_params:
        raise ValueError(f"oracle limited to {max_params} parameters")

    # start from the year-specific log mean carried by the exporter-year dummies
    b = np.zeros(X.shape[1])
    col = k
    for t in years:
        yr = frame["year"].to_numpy() == t
        ne = len(frame.loc[yr, "exporter"].unique())
        b[col:col + ne] = np.log(max(y[yr].mean(), 1e-300))
        col += ne + len(frame.loc[yr, "importer"].unique()) - 1

    b, H, mu, it = _newton_poisson(X, y, b)
    return OracleFit(pd.Series(b[:k], index=names), b, H, X, y, mu, k, it)


def _newton_poisson(X: np.ndarray, y: np.ndarray, b: np.ndarray, max_iter: int = 500):
    """Newton-Raphson with step halving on the Poisson log-likelihood."""

    def loglik(beta):
        eta = X @ beta
        return float(np.sum(y * eta - np.exp(eta)))

    ll = loglik(b)
    for it in range(1, max_iter + 1):
        mu = np.exp(X @ b)
        g = X.T @ (y - mu)
        H = X.T @ (mu[:, None] * X)
        ev = np.linalg.eigvalsh(H)
        if ev[0] <= 1e-15 * ev[-1]:
            raise SingularHessianError(f"Hessian singular at iteration {it} (eigen ratio {ev[0] / ev[-1]:.2e})")
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            cand = b + t * step
            ll_new = loglik(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("line search failed")
        b, ll = cand, ll_new
        if np.max(np.abs(t * step)) < 1e-12:
            mu = np.exp(X @ b)
            return b, X.T @ (mu[:, None] * X), mu, it
    raise ConvergenceError("oracle Newton iteration did not converge")


def oracle_poisson_design(X, y, max_rows: int = 2000, max_params: int = 200) -> np.ndarray:
    """Poisson coefficients for an explicit design matrix, by Newton's method."""
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    y = np.asarray(y, dtype=float)
    if X.shape[0] > max_rows or X.shape[1] > max_params:
        raise ValueError(f"oracle limited to {max_rows} rows and {max_params} parameters")
    return _newton_poisson(X, y, np.zeros(X.shape[1]))[0]


# ---------------------------------------------------------------------------
# general-equilibrium oracle in levels
# ---------------------------------------------------------------------------

def _levels_equilibrium(tau_neg, L, A, xi, eps, zeta, total_output, guess):
    """Solve for log wages and log price indices so that price-index
    equations and goods markets hold, with world output pinned."""
    n = len(L)

    def unpack(x):
        return np.exp(x[:n]), np.exp(x[n:])

    def resid(x):
        w, P = unpack(x)
        p = (w / A) ** zeta * P ** (1 - zeta)
        # tau_neg[i, j] = tau_ij^(-eps); zero marks a pair that never trades
        terms = tau_neg * p[:, None] ** (-eps)
        P_model = terms.sum(axis=0) ** (-1.0 / eps)
        Y = w * L / zeta
        E = Y.sum() / (xi * Y).sum() * xi * Y
        X = terms / (P[None, :] ** (-eps)) * E[None, :]
        demand = X.sum(axis=1)
        r = np.empty(2 * n)
        r[:n] = np.log(P_model) - np.log(P)
        r[n:2 * n - 1] = np.log(demand[:-1]) - np.log(Y[:-1])
        r[2 * n - 1] = np.log(Y.sum()) - np.log(total_output)
        return r

    def jac(x):
        # fixed absolute step: MINPACK's relative step degenerates near x = 0
        h = 1e-7
        cols = [(resid(x + h * e) - resid(x - h * e)) / (2 * h) for e in np.eye(2 * n)]
        return np.array(cols).T

    sol = optimize.root(resid, guess, jac=jac, method="hybr", options={"xtol": 1e-15})
    if not sol.success or np.max(np.abs(resid(sol.x))) > 1e-12:
        sol = optimize.root(resid, sol.x, jac=jac, method="lm", options={"xtol": 1e-15, "ftol": 1e-15})
    if np.max(np.abs(resid(sol.x))) > 1e-11:
        raise ConvergenceError(f"levels solver failed: {sol.message}")
    w, P = unpack(sol.x)
    p = (w / A) ** zeta * P ** (1 - zeta)
    terms = tau_neg * p[:, None] ** (-eps)
    Y = w * L / zeta
    E = Y.sum() / (xi * Y).sum() * xi * Y
    X = terms / (P[None, :] ** (-eps)) * E[None, :]
    return w, P, p, Y, E, X, sol.x


def oracle_ge_levels(base, shock, epsilon: float = DEFAULT_EPSILON, psi: float = 1.24, max_countries: int = 10):
    """Counterfactual changes computed from two levels equilibria.

    Primitives are backed out so that unit prices reproduce the baseline
    flows: ``tau_ij^(-eps) = pi_ij``, labour ``L_i = zeta * Y_i`` and
    productivity one. Both the baseline and the counterfactual are then solved
    from scratch in levels and their ratios returned as a
    :class:`~blocgravity.geq.CounterfactualSolution`.
    """
    from .geq import CounterfactualSolution

    X0 = np.asarray(base.X, dtype=float)
    n = X0.shape[0]
    if n > max_countries:
        raise ValueError(f"levels oracle limited to {max_countries} countries")
    zeta = 1.0 / (1.0 + psi)
    Y0, E0 = X0.sum(axis=1), X0.sum(axis=0)
    pi = X0 / E0[None, :]
    L = zeta * Y0
    A = np.ones(n)
    xi = E0 / Y0
    tau = np.asarray(shock.tau_hat, dtype=float)

    guess = np.zeros(2 * n)
    w0, P0, p0, Yb, Eb, Xb, xb = _levels_equilibrium(pi, L, A, xi, epsilon, zeta, Y0.sum(), guess)
    w1, P1, p1, Y1, E1, X1, _ = _levels_equilibrium(pi * tau ** (-epsilon), L, A, xi, epsilon, zeta,
                                                    Y0.sum(), xb)
    p_hat, P_hat = p1 / p0, P1 / P0
    return CounterfactualSolution(
        countries=tuple(getattr(base, "countries", range(n))),
        p_hat=p_hat,
        P_hat=P_hat,
        w_hat=w1 / w0,
        Y_hat=Y1 / Yb,
        E_hat=E1 / Eb,
        X_prime=X1 * (X0.sum() / Xb.sum()),
        W_hat=(w1 / P1) / (w0 / P0),
        iterations=0,
        residual=0.0,
        epsilon=float(epsilon),
        psi=float(psi),
    )


# ---------------------------------------------------------------------------
# baseline economies for equilibrium tests
# ---------------------------------------------------------------------------

def random_economy(n: int, rng: np.random.Generator, deficits: bool = True, zero_share: float = 0.0):
    """Gravity-shaped random flow matrix with sizeable domestic shares.

    With ``deficits`` the exporter and importer sizes are drawn independently
    so trade is unbalanced.
    """
    from .geq import BaselineEconomy

    size_o = rng.lognormal(0, 1, size=n)
    size_d = rng.lognormal(0, 1, size=n) if deficits else size_o.copy()
    dist = rng.uniform(1, 5, size=(n, n))
    dist = 0.5 * (dist + dist.T)
    X = size_o[:, None] * size_d[None, :] * dist ** (-2.0)
    X[np.diag_indices(n)] = size_o * size_d * rng.uniform(5, 20, size=n)
    if zero_share > 0:
        off = ~np.eye(n, dtype=bool) & (rng.uniform(size=(n, n)) < zero_share)
        X[off] = 0.0
    return BaselineEconomy(tuple(f"C{k:02d}" for k in range(n)), X, rng.uniform(1, 50, size=n))


def two_bloc_economy(n_east: int = 7, n_west: int = 13, n_rest: int = 6, te_ic: float = 48.0,
                     epsilon: float = DEFAULT_EPSILON, east_size: float = 0.3, rest_size: float = 1.0,
                     border: float = 3.5, seed: int = 0):
    """Stylised East/West/rest-of-world economy whose cross-bloc flows carry an
    extra trade cost worth ``te_ic`` percent.

    Flows follow ``size_i * size_j * dist_ij^(-1) * border * IC``: a common
    international border cost ``exp(-border)``, blocs placed as clusters, and the
    cross-bloc penalty ``(1 + te_ic/100)^(-epsilon)``. Bloc sizes are set
    relative to the West by ``east_size`` and ``rest_size``. Returns the
    economy and its taxonomy.
    """
    from .geq import BaselineEconomy

    rng = np.random.default_rng(seed)
    groups = [Group.EAST] * n_east + [Group.WEST] * n_west + [Group.REST_OF_WORLD] * n_rest
    countries = [f"{_PREFIX[g]}{k + 1:02d}" for g, cnt in ((Group.EAST, n_east), (Group.WEST, n_west),
                                                           (Group.REST_OF_WORLD, n_rest)) for k in range(cnt)]
    n = len(countries)
    size = rng.lognormal(0, 0.7, size=n)
    east = np.array([g is Group.EAST for g in groups])
    west = np.array([g is Group.WEST for g in groups])
    rest = ~east & ~west
    size[east] *= east_size * size[west].sum() / size[east].sum()
    size[rest] *= rest_size * size[west].sum() / size[rest].sum()
    centre = np.zeros((n, 2))
    centre[east] = (1500, 0)
    centre[rest] = (0, 4000)
    xy = centre + rng.normal(0, 400, size=(n, 2))
    dist = np.sqrt(((xy[:, None] - xy[None]) ** 2).sum(-1))
    dist[np.diag_indices(n)] = 100.0
    penalty = (1.0 + te_ic / 100.0) ** (-epsilon)
    border_cost = np.where(np.eye(n, dtype=bool), 1.0, np.exp(-border))
    ic = (east[:, None] & west[None]) | (west[:, None] & east[None])
    X = size[:, None] * size[None] * (dist / 100.0) ** (-1.0) * border_cost * np.where(ic, penalty, 1.0)
    tax = BlocTaxonomy({c: g for c, g in zip(countries, groups) if g is not Group.REST_OF_WORLD})
    return BaselineEconomy(tuple(countries), X, rng.uniform(1, 80, size=n)), tax
