"""Poisson pseudo-maximum-likelihood gravity estimation with two-way fixed effects.

The estimator follows the scikit-learn conventions: hyper-parameters are set in
``__init__``, :meth:`PPMLGravity.fit` learns from a :class:`~blocgravity.datamodel.Panel`
(or an equivalent long frame) and stores trailing-underscore attributes.

Exporter-year and importer-year effects are absorbed inside each IRLS step,
either by weighted alternating projections or, for small problems, by an
explicit dummy-variable projection.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, ConvergenceError, CovarianceError
from .datamodel import PAIR_COVARIATES, Panel

logger = logging.getLogger(__name__)

__all__ = [
    "ModelSpec",
    "EstimationResult",
    "PPMLGravity",
    "clustered_covariance",
    "wald_equality",
    "predicted_flows",
    "term_name",
    "poisson_irls",
]

CLUSTER_DIMS = ("exporter", "importer", "year")


def term_name(label: str, year: int | None = None) -> str:
    return label if year is None else f"{label}[{year}]"


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a gravity specification."""

    time_varying_dummies: tuple[str, ...] = ("border", "IC")
    pooled_covariates: tuple[str, ...] = PAIR_COVARIATES
    include_domestic: bool = True
    include_imputed: bool = False
    sample_years: tuple[int, int] | None = None
    pooled_by_year: bool = False

    def __post_init__(self):
        tv = tuple(self.time_varying_dummies)
        if not tv or "border" not in tv:
            raise ConfigurationError("time-varying dummies must be non-empty and include 'border'")
        if len(set(tv)) != len(tv) or set(tv) & set(self.pooled_covariates):
            raise ConfigurationError("regressor labels must be unique")
        object.__setattr__(self, "time_varying_dummies", tv)
        object.__setattr__(self, "pooled_covariates", tuple(self.pooled_covariates))

    def estimator(self, **kwargs) -> "PPMLGravity":
        return PPMLGravity(
            time_varying=self.time_varying_dummies,
            pooled=self.pooled_covariates,
            include_domestic=self.include_domestic,
            include_imputed=self.include_imputed,
            years=self.sample_years,
            pooled_by_year=self.pooled_by_year,
            **kwargs,
        )


@dataclass
class EstimationResult:
    """Everything downstream modules need from a converged fit.

    ``coefficients`` and ``covariance`` share the same index of term names;
    ``terms`` maps each name to its ``(label, year)`` with ``year`` missing for
    pooled covariates.
    """

    coefficients: pd.Series
    covariance: pd.DataFrame
    terms: pd.DataFrame
    fe_values: pd.DataFrame
    diagnostics: dict
    dropped: list[dict]
    score_matrix: np.ndarray = field(repr=False)
    bread: np.ndarray = field(repr=False)
    clusters: pd.DataFrame = field(repr=False)
    leverage: np.ndarray | None = field(default=None, repr=False)

    def theta(self, label: str) -> pd.Series:
        """Per-year coefficients of a time-varying dummy, indexed by year."""
        sel = self.terms[(self.terms["label"] == label) & self.terms["year"].notna()]
        return pd.Series(self.coefficients[sel.index].to_numpy(), index=sel["year"].astype(int).to_numpy(),
                         name=label)

    def coef_table(self) -> pd.DataFrame:
        se = np.sqrt(np.clip(np.diag(self.covariance.to_numpy()), 0, None))
        return pd.DataFrame({
            "label": self.terms["label"].to_numpy(),
            "year": self.terms["year"].to_numpy(),
            "estimate": self.coefficients.to_numpy(),
            "std_error": se,
        })


def _as_result(obj) -> EstimationResult:
    if isinstance(obj, EstimationResult):
        return obj
    check_is_fitted(obj, "result_")
    return obj.result_


# ---------------------------------------------------------------------------
# fixed-effect absorption
# ---------------------------------------------------------------------------

def _indicator(codes: np.ndarray, n_groups: int) -> sp.csr_matrix:
    n = codes.shape[0]
    return sp.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, n_groups))


class _AlternatingProjections:
    """Weighted within-transformation by cycling over the fixed-effect dimensions."""

    def __init__(self, groups: Sequence[np.ndarray], tol: float, max_iter: int):
        self.dims = [(_indicator(g, int(g.max()) + 1)) for g in groups]
        self.tol = tol
        self.max_iter = max_iter

    def residualize(self, M: np.ndarray, w: np.ndarray) -> np.ndarray:
        out = np.array(M, dtype=float, copy=True)
        scale = np.maximum(np.abs(out).max(axis=0), 1.0)
        wsums = [D.T @ w for D in self.dims]
        for _ in range(self.max_iter):
            prev = out.copy()
            for D, ws in zip(self.dims, wsums):
                means = (D.T @ (w[:, None] * out)) / ws[:, None]
                out -= D @ means
            if np.max(np.abs(out - prev) / scale) < self.tol:
                return out
        raise ConvergenceError(f"alternating projections did not converge in {self.max_iter} sweeps")


class _DummyProjection:
    """Weighted least-squares projection on explicit fixed-effect dummies.

    The normal equations are sparse (the levels of different years never
    meet), so they are factorised directly; a singular system falls back to a
    dense least-squares solve.
    """

    def __init__(self, groups: Sequence[np.ndarray], drop_first: Sequence[np.ndarray] = ()):
        blocks = [_indicator(g, int(g.max()) + 1) for g in groups]
        D = sp.hstack(blocks).tocsc()
        keep = np.ones(D.shape[1], dtype=bool)
        for idx in drop_first:
            keep[idx] = False
        self.D = D[:, np.flatnonzero(keep)].tocsr()

    def residualize(self, M: np.ndarray, w: np.ndarray) -> np.ndarray:
        M = np.asarray(M, dtype=float)
        G = (self.D.T @ sp.diags(w) @ self.D).tocsc()
        rhs = self.D.T @ (w[:, None] * M)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sp.linalg.MatrixRankWarning)
                coef = sp.linalg.splu(G).solve(rhs)
            if not np.all(np.isfinite(coef)):
                raise RuntimeError("non-finite solution")
        except (RuntimeError, sp.linalg.MatrixRankWarning):
            sw = np.sqrt(w)
            coef = np.linalg.lstsq(self.D.toarray() * sw[:, None], M * sw[:, None], rcond=None)[0]
        return M - self.D @ coef


class _NoAbsorption:
    """Identity projection for designs without fixed effects."""

    def residualize(self, M: np.ndarray, w: np.ndarray) -> np.ndarray:
        return np.asarray(M, dtype=float)


def _poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        ylogy = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(ylogy - (y - mu)))


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class PPMLGravity(BaseEstimator, RegressorMixin):
    """PPML gravity regression with exporter-year and importer-year fixed effects.

    Parameters
    ----------
    time_varying : sequence of str
        Pair dummies interacted with year (``border`` first by convention).
    pooled : sequence of str
        Pair covariates entering with a single coefficient.
    include_domestic, include_imputed : bool
        Whether domestic rows and half-split imputed flows enter the sample.
    years : (int, int) or None
        Inclusive sample range; ``None`` uses every year in the data.
    pooled_by_year : bool
        Interact pooled covariates with year as well (diagnostic variant).
    absorb : {"auto", "map", "dummy"}
        Fixed-effect path. ``auto`` uses dummies when the number of fixed-effect
        levels is at most ``dummy_threshold``.
    cluster : tuple of dims, "robust" or "triple"
        Covariance type. A tuple of ``exporter``/``importer``/``year`` gives
        multiway clustering by inclusion-exclusion; ``triple`` clusters on the
        exporter-importer-year interaction.
    leverage : {None, "hc2", "hc3"}
        Scale each observation's score by ``(1 - h)^(-1/2)`` or ``(1 - h)^(-1)``
        before forming the meat, where ``h`` is its leverage in the weighted
        model including the fixed effects. Offsets the downward bias of the
        sandwich when fixed effects are numerous.
    tol, step_tol : float
        IRLS stops when the relative deviance change is below ``tol`` and the
        largest coefficient step is below ``step_tol``.
    """

    def __init__(
        self,
        time_varying: Sequence[str] = ("border", "IC"),
        pooled: Sequence[str] = PAIR_COVARIATES,
        include_domestic: bool = True,
        include_imputed: bool = False,
        years: tuple[int, int] | None = None,
        pooled_by_year: bool = False,
        absorb: str = "auto",
        dummy_threshold: int = 20000,
        cluster="multiway",
        leverage: str | None = None,
        small_sample: bool = True,
        tol: float = 1e-10,
        step_tol: float = 1e-8,
        max_iter: int = 100,
        inner_tol: float = 1e-12,
        inner_max_iter: int = 20000,
    ):
        self.time_varying = time_varying
        self.pooled = pooled
        self.include_domestic = include_domestic
        self.include_imputed = include_imputed
        self.years = years
        self.pooled_by_year = pooled_by_year
        self.absorb = absorb
        self.dummy_threshold = dummy_threshold
        self.cluster = cluster
        self.leverage = leverage
        self.small_sample = small_sample
        self.tol = tol
        self.step_tol = step_tol
        self.max_iter = max_iter
        self.inner_tol = inner_tol
        self.inner_max_iter = inner_max_iter

    # -- data handling -----------------------------------------------------

    def _frame(self, X) -> pd.DataFrame:
        if isinstance(X, Panel):
            return X.to_frame(self.include_domestic, self.include_imputed, self.years)
        if not isinstance(X, pd.DataFrame):
            raise TypeError("X must be a Panel or a long DataFrame of flows")
        frame = X
        if self.years is not None:
            frame = frame[(frame["year"] >= self.years[0]) & (frame["year"] <= self.years[1])]
        if not self.include_domestic:
            frame = frame[frame["exporter"] != frame["importer"]]
        return frame.reset_index(drop=True)

    def _check_params(self):
        tv = list(self.time_varying)
        if not tv or "border" not in tv:
            raise ConfigurationError("time_varying must be non-empty and include 'border'")
        if self.absorb not in ("auto", "map", "dummy"):
            raise ConfigurationError(f"unknown absorb path {self.absorb!r}")
        if self.leverage not in LEVERAGE_POWER:
            raise ConfigurationError(f"unknown leverage adjustment {self.leverage!r}")

    def _design(self, frame: pd.DataFrame, years: np.ndarray):
        cols, names, terms = [], [], []
        year = frame["year"].to_numpy()
        missing = [c for c in list(self.time_varying) + list(self.pooled) if c not in frame.columns]
        if missing:
            raise ConfigurationError(f"labels not in the design: {missing}")
        for lab in self.time_varying:
            v = frame[lab].to_numpy(float)
            for t in years:
                cols.append(v * (year == t))
                names.append(term_name(lab, int(t)))
                terms.append((lab, int(t)))
        for lab in self.pooled:
            v = frame[lab].to_numpy(float)
            if self.pooled_by_year:
                for t in years:
                    cols.append(v * (year == t))
                    names.append(term_name(lab, int(t)))
                    terms.append((lab, int(t)))
            else:
                cols.append(v)
                names.append(lab)
                terms.append((lab, None))
        X = np.column_stack(cols) if cols else np.empty((len(frame), 0))
        return X, names, terms

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y=None):
        self._check_params()
        frame = self._frame(X)
        if y is not None:
            frame = frame.assign(value=np.asarray(y, dtype=float))
        if frame.empty:
            raise ValueError("no observations in the estimation sample")
        frame = frame.sort_values(["year", "exporter", "importer"], kind="mergesort").reset_index(drop=True)
        yv = frame["value"].to_numpy(float)
        if not np.all(np.isfinite(yv)) or np.any(yv < 0):
            raise ValueError("flows must be finite and non-negative")
        pos_by_year = frame.assign(pos=yv > 0).groupby("year")["pos"].any()
        if not pos_by_year.all():
            raise ValueError(f"years without a positive flow: {list(pos_by_year.index[~pos_by_year])}")

        years = np.sort(frame["year"].unique())
        Xfull, names, terms = self._design(frame, years)
        dropped: list[dict] = []
        keep_rows = np.ones(len(frame), dtype=bool)
        keep_cols = np.ones(len(names), dtype=bool)

        exp_key = frame["exporter"].astype(str) + "|" + frame["year"].astype(str)
        imp_key = frame["importer"].astype(str) + "|" + frame["year"].astype(str)

        # separation: all-zero fixed-effect groups and dummies whose support carries no trade
        while True:
            changed = False
            for key, side in ((exp_key, "exporter-year"), (imp_key, "importer-year")):
                tot = pd.Series(yv * keep_rows).groupby(key.to_numpy()).transform("sum").to_numpy()
                bad = keep_rows & (tot <= 0)
                if bad.any():
                    dropped.append({"term": f"{side} groups", "reason": "all-zero fixed-effect group",
                                    "rows": int(bad.sum())})
                    keep_rows &= ~bad
                    changed = True
            for k in np.flatnonzero(keep_cols):
                col = Xfull[:, k]
                if np.any(col < 0):
                    continue
                support = keep_rows & (col != 0)
                if support.any() and yv[support].sum() <= 0:
                    dropped.append({"term": names[k], "reason": "separated", "rows": int(support.sum())})
                    keep_cols[k] = False
                    keep_rows &= ~support
                    changed = True
            if not changed:
                break

        rows = np.flatnonzero(keep_rows)
        sub = frame.iloc[rows]
        ysub = yv[rows]
        exp_codes, exp_levels = pd.factorize(exp_key.iloc[rows], sort=True)
        imp_codes, imp_levels = pd.factorize(imp_key.iloc[rows], sort=True)
        groups = [exp_codes, imp_codes]
        n_fe = len(exp_levels) + len(imp_levels)
        path = self.absorb
        if path == "auto":
            path = "dummy" if n_fe <= self.dummy_threshold else "map"
        if path == "dummy":
            # one importer-year level per year is redundant given the exporter-year levels
            imp_years = np.array([lv.rsplit("|", 1)[1] for lv in imp_levels])
            first = [len(exp_levels) + int(np.flatnonzero(imp_years == t)[0]) for t in np.unique(imp_years)]
            absorber = _DummyProjection(groups, [np.array(first, dtype=int)])
        else:
            absorber = _AlternatingProjections(groups, self.inner_tol, self.inner_max_iter)

        # collinearity with the fixed effects and among regressors, in declared order
        Xk = Xfull[np.ix_(rows, np.flatnonzero(keep_cols))]
        col_idx = np.flatnonzero(keep_cols)
        Rt = absorber.residualize(Xk, np.ones(len(rows)))
        basis: list[np.ndarray] = []
        for pos, k in enumerate(col_idx):
            raw = np.linalg.norm(Xk[:, pos])
            v = Rt[:, pos].copy()
            for q in basis:
                v -= (q @ v) * q
            nv = np.linalg.norm(v)
            if raw == 0 or nv <= 1e-9 * max(raw, 1.0):
                dropped.append({"term": names[k], "reason": "collinear" if raw > 0 else "no variation",
                                "rows": 0})
                keep_cols[k] = False
            else:
                basis.append(v / nv)
        col_idx = np.flatnonzero(keep_cols)
        Xs = Xfull[np.ix_(rows, col_idx)]

        beta, eta, mu, diag = self._irls(Xs, ysub, absorber)

        # covariance ingredients at the final weights
        Xt = absorber.residualize(Xs, mu) if Xs.shape[1] else Xs
        H = Xt.T @ (mu[:, None] * Xt)
        bread = np.linalg.inv(H) if H.size else H
        scores = Xt * (ysub - mu)[:, None]
        lev = _fe_leverage(exp_codes, imp_codes, sub["year"].to_numpy(), mu)
        if Xs.shape[1]:
            lev += mu * np.einsum("ij,jk,ik->i", Xt, bread, Xt)

        kept_names = [names[k] for k in col_idx]
        kept_terms = [terms[k] for k in col_idx]
        terms_df = pd.DataFrame(
            {"label": [t[0] for t in kept_terms],
             "year": pd.array([t[1] for t in kept_terms], dtype="Int64")},
            index=kept_names,
        )
        fe_values = self._recover_fe(eta - Xs @ beta, groups, exp_levels, imp_levels)
        clusters = sub[list(CLUSTER_DIMS)].reset_index(drop=True)
        diag.update({
            "absorb_path": path,
            "n_obs": int(len(frame)),
            "n_used": int(len(rows)),
            "n_fixed_effects": int(n_fe),
            "gradient_norm": float(np.max(np.abs(Xs.T @ (ysub - mu)))) if Xs.shape[1] else 0.0,
        })
        coef = pd.Series(beta, index=kept_names, name="estimate")
        empty_cov = pd.DataFrame(np.zeros((len(beta), len(beta))), index=kept_names, columns=kept_names)
        result = EstimationResult(coef, empty_cov, terms_df, fe_values, diag, dropped, scores, bread, clusters,
                                  lev)
        cov, psd_flag = clustered_covariance(result, self.cluster, small_sample=self.small_sample,
                                             leverage=self.leverage, return_flag=True)
        result.covariance = cov
        result.diagnostics["psd_truncated"] = psd_flag

        self.result_ = result
        self.coef_ = coef
        self.vcov_ = cov
        self.feature_names_in_ = np.array(kept_names, dtype=object)
        self.fitted_ = pd.Series(0.0, index=frame.index)
        self.fitted_.iloc[rows] = mu
        self.frame_ = frame
        self.n_iter_ = diag["iterations"]
        self.dropped_ = dropped
        return self

    def _irls(self, X: np.ndarray, y: np.ndarray, absorber):
        n, k = X.shape
        mu = 0.5 * (y + y.mean())
        eta = np.log(mu)
        # the starting point is not a model point, so the first step is never halved towards it
        dev = np.inf
        beta = np.zeros(k)
        trace = []
        for it in range(1, self.max_iter + 1):
            z = eta + (y - mu) / mu
            R = absorber.residualize(np.column_stack([z, X]), mu)
            zt, Xt = R[:, 0], R[:, 1:]
            sw = np.sqrt(mu)
            new_beta = np.linalg.lstsq(Xt * sw[:, None], zt * sw, rcond=None)[0] if k else beta
            new_eta = z - (zt - Xt @ new_beta)
            new_mu = np.exp(new_eta)
            new_dev = _poisson_deviance(y, new_mu)
            halvings = 0
            while (not np.isfinite(new_dev) or new_dev > dev * (1 + 1e-9) + 1e-12) and halvings < 30:
                new_eta = 0.5 * (eta + new_eta)
                new_beta = 0.5 * (beta + new_beta)
                new_mu = np.exp(new_eta)
                new_dev = _poisson_deviance(y, new_mu)
                halvings += 1
            rel = abs(new_dev - dev) / max(min(new_dev, dev), 0.1) if np.isfinite(dev) else np.inf
            step = float(np.max(np.abs(new_beta - beta))) if k else 0.0
            trace.append({"iteration": it, "deviance": new_dev, "rel_change": rel, "max_step": step})
            beta, eta, mu, dev = new_beta, new_eta, new_mu, new_dev
            if rel < self.tol and step < self.step_tol:
                return beta, eta, mu, {"iterations": it, "deviance": dev, "converged": True, "trace": trace}
        raise ConvergenceError(f"IRLS did not converge in {self.max_iter} iterations", trace)

    def _recover_fe(self, offset, groups, exp_levels, imp_levels) -> pd.DataFrame:
        e, m = groups
        ne, nm = len(exp_levels), len(imp_levels)
        ce, cm = np.bincount(e, minlength=ne), np.bincount(m, minlength=nm)
        phi, psi = np.zeros(ne), np.zeros(nm)
        scale = max(np.abs(offset).max(), 1.0)
        for _ in range(self.inner_max_iter):
            phi_new = np.bincount(e, offset - psi[m], minlength=ne) / ce
            psi_new = np.bincount(m, offset - phi_new[e], minlength=nm) / cm
            delta = max(np.abs(phi_new - phi).max(), np.abs(psi_new - psi).max())
            phi, psi = phi_new, psi_new
            if delta < 1e-14 * scale:
                break
        exp_c, exp_y = zip(*(lv.rsplit("|", 1) for lv in exp_levels))
        imp_c, imp_y = zip(*(lv.rsplit("|", 1) for lv in imp_levels))
        exp_y = np.array(exp_y, dtype=int)
        imp_y = np.array(imp_y, dtype=int)
        # normalise importer effects to mean zero within each year
        for t in np.unique(imp_y):
            c = psi[imp_y == t].mean()
            psi[imp_y == t] -= c
            phi[exp_y == t] += c
        return pd.concat([
            pd.DataFrame({"country": exp_c, "year": exp_y, "side": "exporter", "value": phi}),
            pd.DataFrame({"country": imp_c, "year": imp_y, "side": "importer", "value": psi}),
        ], ignore_index=True)

    # -- prediction --------------------------------------------------------

    def predict(self, X) -> np.ndarray:
        """Fitted means ``exp(x'b + fixed effects)``; rows absorbed by separation get 0."""
        check_is_fitted(self, "result_")
        frame = self._frame(X) if not isinstance(X, pd.DataFrame) else X.reset_index(drop=True)
        res = self.result_
        years = np.sort(self.frame_["year"].unique())
        Xfull, names, _ = self._design(frame, years)
        pos = {n: i for i, n in enumerate(names)}
        eta = Xfull[:, [pos[n] for n in res.coefficients.index]] @ res.coefficients.to_numpy()
        fe = res.fe_values.set_index(["country", "year", "side"])["value"]
        ex = pd.MultiIndex.from_arrays([frame["exporter"], frame["year"], ["exporter"] * len(frame)])
        im = pd.MultiIndex.from_arrays([frame["importer"], frame["year"], ["importer"] * len(frame)])
        phi = fe.reindex(ex).to_numpy()
        psi = fe.reindex(im).to_numpy()
        out = np.exp(eta + phi + psi)
        # dropped separated dummies push their support to zero
        for d in res.dropped:
            if d["reason"] == "separated" and d["term"] in pos:
                out[Xfull[:, pos[d["term"]]] != 0] = 0.0
        return np.where(np.isfinite(out), out, 0.0)

    def score(self, X, y=None):
        """Negative Poisson deviance per observation (higher is better)."""
        frame = self._frame(X)
        yv = frame["value"].to_numpy(float) if y is None else np.asarray(y, float)
        return -_poisson_deviance(yv, np.maximum(self.predict(frame), 1e-300)) / len(yv)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

LEVERAGE_POWER = {None: 0.0, "hc2": 0.5, "hc3": 1.0}


def _fe_leverage(exp_codes: np.ndarray, imp_codes: np.ndarray, years: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Diagonal of the weighted hat matrix of the exporter-year and importer-year dummies.

    The dummies of different years never overlap, so the projection is built
    year by year; each row loads on exactly one exporter and one importer level.
    """
    h = np.zeros(len(w))
    for t in np.unique(years):
        idx = np.flatnonzero(years == t)
        e, e_levels = pd.factorize(exp_codes[idx])
        m, m_levels = pd.factorize(imp_codes[idx])
        m = m + len(e_levels)
        G = np.zeros((len(e_levels) + len(m_levels),) * 2)
        wt = w[idx]
        np.add.at(G, (e, e), wt)
        np.add.at(G, (m, m), wt)
        np.add.at(G, (e, m), wt)
        np.add.at(G, (m, e), wt)
        A = np.linalg.pinv(G, hermitian=True)
        h[idx] = wt * (A[e, e] + A[m, m] + 2.0 * A[e, m])
    return h


def _meat(scores: np.ndarray, ids: np.ndarray) -> tuple[np.ndarray, int]:
    codes, levels = pd.factorize(ids, sort=True)
    G = len(levels)
    S = np.zeros((G, scores.shape[1]))
    np.add.at(S, codes, scores)
    return S.T @ S, G


def clustered_covariance(result, dims="multiway", *, small_sample: bool = True, leverage: str | None = None,
                         return_flag: bool = False):
    """Cluster-robust sandwich covariance of the regressor coefficients.

    ``dims`` is a tuple drawn from ``("exporter", "importer", "year")`` for
    multiway clustering (``"multiway"`` means all three), ``"triple"`` for
    one-way clustering on their interaction, or ``"robust"`` for the
    heteroskedasticity-robust sandwich. Each meat term carries ``G/(G-1)``
    when ``small_sample`` is set. ``leverage`` (``"hc2"`` or ``"hc3"``) rescales
    the scores by their leverage first; observations fitted exactly (leverage
    one) then contribute nothing. A matrix that is not positive semi-definite
    has its negative eigenvalues set to zero and the returned flag set.
    """
    res = _as_result(result)
    S = res.score_matrix
    if leverage not in LEVERAGE_POWER:
        raise ConfigurationError(f"unknown leverage adjustment {leverage!r}")
    if leverage is not None:
        if res.leverage is None:
            raise ConfigurationError("result carries no leverage values")
        resid = 1.0 - res.leverage
        scale = np.where(resid > 1e-10, np.maximum(resid, 1e-10) ** -LEVERAGE_POWER[leverage], 0.0)
        S = S * scale[:, None]
    B = res.bread
    names = list(res.coefficients.index)
    n = S.shape[0]
    cl = res.clusters
    if dims == "multiway":
        dims = CLUSTER_DIMS
    if dims == "robust":
        subsets = [((), np.arange(n))]
    elif dims == "triple":
        subsets = [(("triple",), cl.groupby(list(CLUSTER_DIMS), sort=True).ngroup().to_numpy())]
    else:
        dims = tuple(dims)
        bad = [d for d in dims if d not in CLUSTER_DIMS]
        if not dims or bad:
            raise ConfigurationError(f"invalid cluster dimensions {dims}")
        for d in dims:
            if cl[d].nunique() < 2:
                raise CovarianceError(f"clustering dimension {d!r} has a single cluster")
        if "year" in dims and len(dims) > 1 and any("[" in name for name in names):
            # a year-specific score sums to zero within its year, so the year terms of the
            # inclusion-exclusion cancel and only the small-sample factors keep them apart
            logger.warning("multiway clustering on year is degenerate for year-specific coefficients; "
                           "consider cluster=('exporter', 'importer') or 'robust'")
        subsets = []
        for r in range(1, len(dims) + 1):
            for combo in combinations(dims, r):
                subsets.append((combo, cl.groupby(list(combo), sort=True).ngroup().to_numpy()))

    meat = np.zeros((S.shape[1], S.shape[1]))
    for combo, ids in subsets:
        M, G = _meat(S, ids)
        if G < 2:
            raise CovarianceError(f"clustering on {combo} yields a single cluster")
        factor = G / (G - 1) if small_sample else 1.0
        sign = 1.0 if len(combo) % 2 == 1 or combo == () else -1.0
        meat += sign * factor * M
    V = B @ meat @ B
    V = 0.5 * (V + V.T)
    flag = False
    if V.size:
        vals, vecs = np.linalg.eigh(V)
        if vals.min() < -1e-12 * max(abs(vals.max()), 1e-300):
            flag = True
            V = (vecs * np.clip(vals, 0, None)) @ vecs.T
            V = 0.5 * (V + V.T)
    V = pd.DataFrame(V, index=names, columns=names)
    return (V, flag) if return_flag else V


def wald_equality(result, group_a: Iterable[int], group_b: Iterable[int], label: str):
    """Chi-square(1) test that the mean coefficient over ``group_a`` years equals
    the mean over ``group_b`` years.

    Returns ``(statistic, p_value)``.
    """
    res = _as_result(result)
    group_a, group_b = sorted(set(group_a)), sorted(set(group_b))
    if not group_a or not group_b:
        raise ValueError("year groups must be non-empty")
    names = list(res.coefficients.index)
    R = np.zeros(len(names))
    for yrs, w in ((group_a, 1.0), (group_b, -1.0)):
        for t in yrs:
            nm = term_name(label, t)
            if nm not in names:
                raise KeyError(f"no estimate for {label} in {t}")
            R[names.index(nm)] += w / len(yrs)
    V = res.covariance.to_numpy()
    diff = float(R @ res.coefficients.to_numpy())
    denom = float(R @ V @ R)
    if not denom > 0:
        raise CovarianceError(f"contrast variance is {denom!r}; covariance is defective")
    stat = diff * diff / denom
    return stat, float(stats.chi2.sf(stat, df=1))


def poisson_irls(X, y, *, tol: float = 1e-10, step_tol: float = 1e-8, max_iter: int = 100):
    """Plain Poisson regression of ``y`` on the columns of ``X`` (no fixed effects).

    Uses the same reweighting loop as :class:`PPMLGravity`. Returns
    ``(beta, mu, info)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("y must be finite and non-negative")
    est = PPMLGravity(tol=tol, step_tol=step_tol, max_iter=max_iter)
    beta, _, mu, info = est._irls(X, y, _NoAbsorption())
    return beta, mu, info


def predicted_flows(model: PPMLGravity, panel=None) -> pd.DataFrame:
    """Observed and fitted flows for every in-sample record."""
    check_is_fitted(model, "result_")
    frame = model.frame_ if panel is None else model._frame(panel)
    fitted = model.fitted_.to_numpy() if panel is None else model.predict(frame)
    out = frame[["exporter", "importer", "year", "value"]].copy()
    out["fitted"] = fitted
    return out
