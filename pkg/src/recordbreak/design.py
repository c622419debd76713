"""Covariates of the record-probability logit model.

The main model (days 3..365) uses an intercept and 20 covariates built from
orthogonal polynomials of ``log(t - 1)``, the two previous days' record
indicators, one annual harmonic and ``log(dist_coast)``.  Days 1 and 2 use a
reduced ``(1, trend1, previous-day indicator)`` row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .records import N_DAYS, lagged

DESIGN_COLUMNS = (
    "intercept", "trend1", "trend2",
    "lag1", "lag2", "lag1:lag2",
    "logt:lag1", "logt:lag2", "logt:lag1:lag2",
    "sin", "cos", "sin:trend1", "cos:trend1", "sin:trend2", "cos:trend2",
    "logdist", "logdist:trend1", "logdist:trend2",
    "logdist:lag1", "logdist:lag2", "logdist:lag1:lag2",
)
INITIAL_COLUMNS = ("intercept", "trend1", "lag1")
N_COVARIATES = len(DESIGN_COLUMNS)


@dataclass(frozen=True)
class OrthoPolyBasis:
    """Orthonormal polynomials of ``log(t - 1)`` over ``t = 2..T``.

    Built with the three-term (Stieltjes) recurrence so that the stored
    ``alpha`` and ``norm2`` coefficients evaluate the same polynomials at any
    year, inside or outside the fitting support.
    """

    T: int
    alpha: np.ndarray
    norm2: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.log(np.arange(1, self.T, dtype=float))

    def evaluate(self, t) -> np.ndarray:
        """Degree-1 and degree-2 columns at years ``t``; shape ``(..., 2)``."""
        x = np.log(np.asarray(t, dtype=float) - 1.0)
        p0 = np.ones_like(x)
        p1 = x - self.alpha[0]
        p2 = (x - self.alpha[1]) * p1 - (self.norm2[1] / self.norm2[0]) * p0
        return np.stack([p1 / np.sqrt(self.norm2[1]), p2 / np.sqrt(self.norm2[2])], axis=-1)

    def columns(self) -> np.ndarray:
        """Basis evaluated over the support, shape ``(T - 1, 2)``."""
        return self.evaluate(np.arange(2, self.T + 1))


def build_ortho_poly(T: int) -> OrthoPolyBasis:
    """Degree-2 orthonormal basis of ``log(t - 1)`` for ``t = 2..T``."""
    if T < 4:
        raise ValueError(f"degree-2 basis needs T >= 4, got T={T}")
    x = np.log(np.arange(1, T, dtype=float))
    alpha = np.zeros(2)
    norm2 = np.zeros(3)
    p_prev = np.ones_like(x)
    norm2[0] = p_prev @ p_prev
    alpha[0] = x @ p_prev / norm2[0]
    p = x - alpha[0]
    norm2[1] = p @ p
    alpha[1] = (x * p) @ p / norm2[1]
    p_next = (x - alpha[1]) * p - (norm2[1] / norm2[0]) * p_prev
    norm2[2] = p_next @ p_next
    return OrthoPolyBasis(T=T, alpha=alpha, norm2=norm2)


def harmonics(day) -> tuple:
    """``(sin(2 pi l / 365), cos(2 pi l / 365))``."""
    angle = 2.0 * np.pi * np.asarray(day, dtype=float) / N_DAYS
    return np.sin(angle), np.cos(angle)


def design_matrix(t, day, lag1, lag2, dist, basis: OrthoPolyBasis) -> np.ndarray:
    """Vectorised main-model design; inputs broadcast, output ``(..., 21)``."""
    t, day, lag1, lag2, dist = np.broadcast_arrays(
        np.asarray(t, dtype=float), np.asarray(day, dtype=float),
        np.asarray(lag1, dtype=float), np.asarray(lag2, dtype=float),
        np.asarray(dist, dtype=float))
    tr = basis.evaluate(t)
    tr1, tr2 = tr[..., 0], tr[..., 1]
    logt = np.log(t - 1.0)
    s, c = harmonics(day)
    ld = np.log(dist)
    l12 = lag1 * lag2
    cols = (
        np.ones_like(t), tr1, tr2,
        lag1, lag2, l12,
        logt * lag1, logt * lag2, logt * l12,
        s, c, s * tr1, c * tr1, s * tr2, c * tr2,
        ld, ld * tr1, ld * tr2,
        ld * lag1, ld * lag2, ld * l12,
    )
    return np.stack(cols, axis=-1)


def build_design_row(t: int, day: int, lag1: int, lag2: int, dist: float,
                     basis: OrthoPolyBasis) -> np.ndarray:
    """Single 21-entry row for year ``t >= 2`` and day ``3 <= day <= 365``."""
    if t < 2:
        raise ValueError("design rows start at t = 2")
    if not 3 <= day <= N_DAYS:
        raise ValueError("main-model rows need day >= 3; days 1-2 use build_initial_rows")
    if lag1 not in (0, 1) or lag2 not in (0, 1):
        raise ValueError("lag indicators must be 0 or 1")
    if not dist > 0:
        raise ValueError("distance to coast must be positive")
    return design_matrix(t, day, lag1, lag2, dist, basis)


def initial_design(t, lag, basis: OrthoPolyBasis) -> np.ndarray:
    """Vectorised ``(1, trend1, lag)`` rows, output ``(..., 3)``."""
    t, lag = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(lag, dtype=float))
    return np.stack([np.ones_like(t), basis.evaluate(t)[..., 0], lag], axis=-1)


def build_initial_rows(t: int, lag: int, which_day: int, basis: OrthoPolyBasis) -> np.ndarray:
    """Row for day 1 (lag = previous year's day 365) or day 2 (lag = day 1)."""
    if t < 2:
        raise ValueError("initial-condition rows start at t = 2")
    if which_day not in (1, 2):
        raise ValueError("which_day must be 1 or 2")
    if lag not in (0, 1):
        raise ValueError("lag indicator must be 0 or 1")
    return initial_design(t, lag, basis)


def panel_design(values: np.ndarray, dist: np.ndarray, basis: OrthoPolyBasis,
                 days=None) -> dict[str, np.ndarray]:
    """Raw design arrays for every fitted block of an indicator cube.

    Parameters
    ----------
    values : ndarray, shape (n_sites, T, 365)
        0/1 indicators (ties already resolved).
    dist : ndarray, shape (n_sites,)
    basis : OrthoPolyBasis
    days : sequence of int, optional
        Main-model days (1-based, each >= 3).  Defaults to 3..365.

    Returns
    -------
    dict
        ``"main"`` with shape ``(T - 1, n_days, n_sites, 21)`` and
        ``"day1"``/``"day2"`` with shape ``(T - 1, n_sites, 3)``.
    """
    n, T, _ = values.shape
    days = np.arange(3, N_DAYS + 1) if days is None else np.asarray(days, dtype=int)
    lag1 = lagged(values, 1)
    lag2 = lagged(values, 2)
    t = np.arange(2, T + 1)
    d = days - 1
    # (T-1, n_days, n_sites)
    l1 = np.transpose(lag1[:, 1:, :][:, :, d], (1, 2, 0))
    l2 = np.transpose(lag2[:, 1:, :][:, :, d], (1, 2, 0))
    main = design_matrix(t[:, None, None], days[None, :, None], l1, l2,
                         dist[None, None, :], basis)
    day1 = initial_design(t[:, None], lag1[:, 1:, 0].T, basis)
    day2 = initial_design(t[:, None], lag1[:, 1:, 1].T, basis)
    return {"main": main, "day1": day1, "day2": day2}


@dataclass(frozen=True)
class ScalingSpec:
    """Per-column centring and scale; unscaled columns have mean 0, scale 1."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def invert(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def unscale_coefficients(self, coef) -> np.ndarray:
        """Raw-covariate coefficients giving the same linear predictor.

        Column 0 must be the intercept.  Works on a single vector or on
        stacked draws along the leading axes.
        """
        coef = np.asarray(coef, dtype=float)
        raw = coef / self.scale
        raw[..., 0] = coef[..., 0] - np.sum(coef[..., 1:] * self.mean[1:] / self.scale[1:], axis=-1)
        return raw

    @classmethod
    def identity(cls, p: int) -> "ScalingSpec":
        return cls(np.zeros(p), np.ones(p))


def fit_scaling(X, intercept: bool = True) -> ScalingSpec:
    """Zero-mean, unit-variance scaling of every column except the intercept."""
    X = np.asarray(X, dtype=float).reshape(-1, np.shape(X)[-1])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    first = 1 if intercept else 0
    const = np.flatnonzero(scale[first:] <= 1e-12 * np.maximum(1.0, np.abs(mean[first:])))
    if const.size:
        raise ValueError(f"constant design column(s) {[int(c) + first for c in const]} cannot be scaled")
    if intercept:
        mean[0], scale[0] = 0.0, 1.0
    return ScalingSpec(mean=mean, scale=scale)


def apply_scaling(row, spec: ScalingSpec) -> np.ndarray:
    return spec.apply(row)


class CovariateScaler(TransformerMixin, BaseEstimator):
    """Standardise design columns, leaving the intercept column untouched.

    Parameters
    ----------
    intercept : bool, default=True
        Whether column 0 is an intercept to be passed through.
    """

    def __init__(self, intercept: bool = True):
        self.intercept = intercept

    def fit(self, X, y=None):
        X = check_array(X)
        self.spec_ = fit_scaling(X, intercept=self.intercept)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return self.spec_.apply(X)

    def inverse_transform(self, X):
        check_is_fitted(self, "spec_")
        return self.spec_.invert(check_array(X))
