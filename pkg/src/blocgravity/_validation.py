"""Input validation helpers and exception types shared across modules."""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ConfigurationError",
    "ConversionError",
    "MergeError",
    "ExtrapolationError",
    "ConvergenceError",
    "SingularHessianError",
    "CovarianceError",
    "check_country_code",
    "check_positive",
    "check_nonnegative",
    "check_square_nonnegative",
]


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration."""


class ConversionError(KeyError):
    """An exchange rate needed for a conversion is missing."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MergeError(ValueError):
    """Conflicting collected rows for the same panel cell."""


class ExtrapolationError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    ``trace`` holds the per-iteration criterion so callers can inspect how
    far the solver got.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class SingularHessianError(np.linalg.LinAlgError):
    pass


class CovarianceError(ValueError):
    pass


def check_country_code(code) -> str:
    if not isinstance(code, str) or not code.strip():
        raise ValueError(f"country code must be a non-empty string, got {code!r}")
    return code


def check_positive(value, name: str) -> float:
    value = float(value)
    if not (math.isfinite(value) and value > 0):
        raise ConfigurationError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not (math.isfinite(value) and value >= 0):
        raise ConfigurationError(f"{name} must be non-negative and finite, got {value!r}")
    return value


def check_square_nonnegative(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)) or np.any(X < 0):
        raise ValueError(f"{name} must be finite and non-negative")
    return X
