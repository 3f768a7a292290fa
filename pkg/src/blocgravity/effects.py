"""Tariff equivalents of estimated trade-cost dummies, with delta-method inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, check_positive
from .ppml import _as_result

__all__ = [
    "DEFAULT_EPSILON",
    "NORMAL_95",
    "tariff_equivalent",
    "tariff_se_delta",
    "theta_from_tariff",
    "TariffSeries",
    "build_series",
    "TariffEquivalent",
]

DEFAULT_EPSILON = 5.03
NORMAL_95 = 1.959964


def tariff_equivalent(theta, epsilon: float = DEFAULT_EPSILON):
    """Ad valorem tariff (percent) with the same trade effect as ``theta``."""
    epsilon = check_positive(epsilon, "epsilon")
    # adding zero turns the -0.0 produced at theta = 0 into 0.0
    return (100.0 * np.expm1(-np.asarray(theta, dtype=float) / epsilon) + 0.0)[()]


def theta_from_tariff(te, epsilon: float = DEFAULT_EPSILON):
    """Inverse of :func:`tariff_equivalent`."""
    epsilon = check_positive(epsilon, "epsilon")
    te = np.asarray(te, dtype=float)
    if np.any(te <= -100):
        raise ValueError("tariff equivalents must exceed -100%")
    return (-epsilon * np.log1p(te / 100.0))[()]


def tariff_se_delta(theta, var_theta, epsilon: float = DEFAULT_EPSILON):
    """Delta-method standard error of the tariff equivalent."""
    epsilon = check_positive(epsilon, "epsilon")
    var_theta = np.asarray(var_theta, dtype=float)
    if np.any(var_theta < 0) or np.any(~np.isfinite(var_theta)):
        raise ValueError("variance must be finite and non-negative")
    grad = 100.0 / epsilon * np.exp(-np.asarray(theta, dtype=float) / epsilon)
    return (grad * np.sqrt(var_theta))[()]


@dataclass(frozen=True)
class TariffSeries:
    """Per-year tariff equivalents for one dummy.

    Years without an estimate are simply absent; nothing is interpolated.
    """

    label: str
    epsilon: float
    table: pd.DataFrame  # year-indexed: theta, theta_se, te, te_se, te_lo, te_hi

    @property
    def years(self) -> list[int]:
        return [int(t) for t in self.table.index]

    def to_frame(self) -> pd.DataFrame:
        out = self.table.reset_index().rename(columns={"index": "year"})
        out.insert(0, "label", self.label)
        return out


def build_series(result, label: str, epsilon: float = DEFAULT_EPSILON, z: float = NORMAL_95) -> TariffSeries:
    res = _as_result(result)
    theta = res.theta(label)
    if theta.empty:
        raise KeyError(f"no time-varying estimates for {label!r}")
    names = [f"{label}[{t}]" for t in theta.index]
    var = np.clip(np.diag(res.covariance.loc[names, names].to_numpy()), 0, None)
    return series_from_estimates(label, theta.index, theta.to_numpy(), var, epsilon, z)


def series_from_estimates(label, years, theta, var, epsilon=DEFAULT_EPSILON, z=NORMAL_95) -> TariffSeries:
    theta = np.asarray(theta, dtype=float)
    var = np.asarray(var, dtype=float)
    te = tariff_equivalent(theta, epsilon)
    se = tariff_se_delta(theta, var, epsilon)
    table = pd.DataFrame(
        {"theta": theta, "theta_se": np.sqrt(var), "te": te, "te_se": se, "te_lo": te - z * se, "te_hi": te + z * se},
        index=pd.Index(np.asarray(years, dtype=int), name="year"),
    )
    return TariffSeries(label, float(epsilon), table)


class TariffEquivalent(TransformerMixin, BaseEstimator):
    """Transformer mapping coefficients to tariff equivalents.

    ``fit`` is a no-op kept for pipeline compatibility; ``inverse_transform``
    recovers the coefficients.
    """

    def __init__(self, epsilon: float = DEFAULT_EPSILON):
        self.epsilon = epsilon

    def fit(self, X=None, y=None):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        self.epsilon_ = float(self.epsilon)
        return self

    def transform(self, X):
        check_is_fitted(self, "epsilon_")
        return tariff_equivalent(X, self.epsilon_)

    def inverse_transform(self, X):
        check_is_fitted(self, "epsilon_")
        return theta_from_tariff(X, self.epsilon_)
