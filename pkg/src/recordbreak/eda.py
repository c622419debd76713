"""Exploratory record statistics and maximum-likelihood logit screening.

Empirical yearly record rates, persistence contingency tables with
continuity-corrected log odds ratios, and IRLS logistic fits used to compare
nested covariate sets by AIC.  Tied indicators count as 0 throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .design import OrthoPolyBasis, build_ortho_poly, design_matrix
from .records import N_DAYS, RecordTensor, lagged

SEPARATION_BOUND = 30.0


class ConvergenceError(RuntimeError):
    """IRLS did not converge within the iteration budget."""


class SeparationWarning(UserWarning):
    """Coefficients diverged, suggesting (quasi-)separation."""


def _year_index(tensor: RecordTensor, t: int) -> int:
    T = tensor.shape[1]
    if not 2 <= t <= T:
        raise ValueError(f"t must lie in 2..{T}, got {t}")
    return t - 1


def empirical_p_hat(tensor: RecordTensor, t: int) -> float:
    """Share of records in year ``t`` over all sites and days."""
    return float(tensor.values("exclude")[:, _year_index(tensor, t), :].mean())


def p_hat_series(tensor: RecordTensor) -> np.ndarray:
    """``p_hat`` for ``t = 2..T``."""
    return tensor.values("exclude")[:, 1:, :].mean(axis=(0, 2))


def moving_average(x, window: int = 5) -> np.ndarray:
    """Centred moving average; edges average over the available points."""
    x = np.asarray(x, dtype=float)
    if window < 1:
        raise ValueError("window must be positive")
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(x.size)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, x.size)
    return (c[hi] - c[lo]) / (hi - lo)


@dataclass(frozen=True)
class Table2x2:
    """Counts ``n[j, k]``: ``j`` today's indicator, ``k`` yesterday's."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (2, 2) or np.any(c < 0):
            raise ValueError("2x2 counts must be non-negative with shape (2, 2)")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Table2x2x2:
    """Counts ``n[j, k, v]``: today, one day ago, two days ago."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (2, 2, 2) or np.any(c < 0):
            raise ValueError("2x2x2 counts must be non-negative with shape (2, 2, 2)")
        object.__setattr__(self, "counts", c.astype(np.int64))

    def collapse(self) -> Table2x2:
        return Table2x2(self.counts.sum(axis=2))


def _lag_views(tensor: RecordTensor):
    v = tensor.values("exclude")
    return v, lagged(v, 1), lagged(v, 2)


def persistence_table(tensor: RecordTensor, t: int) -> Table2x2:
    """Today-by-yesterday counts for year ``t`` over all sites and days."""
    i = _year_index(tensor, t)
    v, l1, _ = _lag_views(tensor)
    code = 2 * v[:, i, :].astype(int) + l1[:, i, :]
    return Table2x2(np.bincount(code.ravel(), minlength=4).reshape(2, 2))


def persistence_table3(tensor: RecordTensor, t: int) -> Table2x2x2:
    """Today-by-yesterday-by-two-days-ago counts for year ``t``."""
    i = _year_index(tensor, t)
    v, l1, l2 = _lag_views(tensor)
    code = 4 * v[:, i, :].astype(int) + 2 * l1[:, i, :] + l2[:, i, :]
    return Table2x2x2(np.bincount(code.ravel(), minlength=8).reshape(2, 2, 2))


def log_odds_ratio(table: Table2x2) -> float:
    """Log cross-product ratio with 0.5 added to every cell."""
    n = table.counts + 0.5
    return float(np.log(n[1, 1] * n[0, 0]) - np.log(n[0, 1] * n[1, 0]))


def second_order_lors(table: Table2x2x2) -> tuple[float, float]:
    """Today-vs-yesterday LOR within each two-days-ago layer.

    Returns
    -------
    (lor_given_record, lor_given_no_record)
        Layers ``v = 1`` and ``v = 0`` respectively.
    """
    n = table.counts + 0.5
    out = []
    for v in (1, 0):
        m = n[:, :, v]
        out.append(float(np.log(m[0, 0] * m[1, 1]) - np.log(m[1, 0] * m[0, 1])))
    return out[0], out[1]


def yearly_eda(tensor: RecordTensor) -> dict[str, np.ndarray]:
    """Per-year ``p_hat`` and the three LOR series for ``t = 2..T``."""
    T = tensor.shape[1]
    t = np.arange(2, T + 1)
    lor1 = np.empty(t.size)
    lor_r = np.empty(t.size)
    lor_n = np.empty(t.size)
    for k, tt in enumerate(t):
        tab3 = persistence_table3(tensor, int(tt))
        lor1[k] = log_odds_ratio(tab3.collapse())
        lor_r[k], lor_n[k] = second_order_lors(tab3)
    return {"t": t, "p_hat": p_hat_series(tensor), "lor1": lor1,
            "lor_..1": lor_r, "lor_..0": lor_n}


# ---------------------------------------------------------------------------
# Maximum-likelihood logit


@dataclass(frozen=True)
class LogitFit:
    """Result of a maximum-likelihood logistic fit."""

    coef: np.ndarray
    loglik: float
    dof: int
    aic: float
    converged: bool
    separated: bool = False
    n_iter: int = 0
    cov: np.ndarray | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov)) if self.cov is not None else np.full(self.dof, np.nan)


def _bernoulli_loglik(y: np.ndarray, eta: np.ndarray) -> float:
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def fit_logit_mle(design, response, offset=None, max_iter: int = 50,
                  tol: float = 1e-10) -> LogitFit:
    """Newton/IRLS maximum likelihood for a Bernoulli logit model.

    Parameters
    ----------
    design : array_like, shape (n, p)
        May have ``p = 0`` for an offset-only model.
    response : array_like of {0, 1}, shape (n,)
    offset : array_like, shape (n,), optional
    max_iter : int
    tol : float
        Relative deviance change declaring convergence.

    Raises
    ------
    ConvergenceError
        When the iteration budget runs out without separation.
    """
    y = np.asarray(response, dtype=float).ravel()
    X = np.asarray(design, dtype=float).reshape(y.size, -1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("response must be binary")
    off = np.zeros_like(y) if offset is None else np.asarray(offset, dtype=float).ravel()
    p = X.shape[1]
    if p == 0:
        ll = _bernoulli_loglik(y, off)
        return LogitFit(np.zeros(0), ll, 0, -2.0 * ll, True, n_iter=0, cov=np.zeros((0, 0)))
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("design matrix is not of full column rank")
    beta = np.zeros(p)
    dev = -2.0 * _bernoulli_loglik(y, off)
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta + off
        mu = expit(eta)
        w = mu * (1 - mu)
        grad = X.T @ (y - mu)
        H = X.T @ (X * w[:, None])
        step = np.linalg.solve(H, grad)
        # halve until the deviance stops increasing
        for _ in range(30):
            cand = beta + step
            new_dev = -2.0 * _bernoulli_loglik(y, X @ cand + off)
            if new_dev <= dev + 1e-12 * abs(dev):
                break
            step = step / 2.0
        change = abs(dev - new_dev) / (abs(new_dev) + 0.1)
        beta, dev = cand, new_dev
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            separated = True
            break
        if change < tol:
            converged = True
            break
    if separated:
        warnings.warn("logit coefficients diverged beyond |30|; quasi-separation suspected",
                      SeparationWarning, stacklevel=2)
    elif not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")
    else:
        # one more Newton step polishes the gradient once deviance is flat
        mu = expit(X @ beta + off)
        H = X.T @ (X * (mu * (1 - mu))[:, None])
        beta = beta + np.linalg.solve(H, X.T @ (y - mu))
    mu = expit(X @ beta + off)
    H = X.T @ (X * (mu * (1 - mu))[:, None])
    ll = _bernoulli_loglik(y, X @ beta + off)
    cov = np.linalg.inv(H) if not separated else None
    return LogitFit(beta, ll, p, -2.0 * ll + 2 * p, converged, separated, it, cov)


class LogitMLE(ClassifierMixin, BaseEstimator):
    """Maximum-likelihood logistic regression on a user-supplied design.

    The design is used as given (include an intercept column explicitly).

    Parameters
    ----------
    max_iter : int, default=50
    tol : float, default=1e-10
    """

    def __init__(self, max_iter: int = 50, tol: float = 1e-10):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, offset=None):
        X, y = check_X_y(X, y)
        self.classes_ = np.array([0, 1])
        fit = fit_logit_mle(X, y, offset=offset, max_iter=self.max_iter, tol=self.tol)
        self.fit_ = fit
        self.coef_ = fit.coef
        self.loglik_ = fit.loglik
        self.aic_ = fit.aic
        self.dof_ = fit.dof
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X, offset=None):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        eta = X @ self.coef_
        return eta if offset is None else eta + np.asarray(offset, dtype=float)

    def predict_proba(self, X, offset=None):
        p = expit(self.decision_function(X, offset))
        return np.column_stack([1 - p, p])

    def predict(self, X, offset=None):
        return (self.decision_function(X, offset) > 0).astype(int)


# ---------------------------------------------------------------------------
# Nested model screening

# columns of the full design added at each nested step
_NESTED_STEPS = (
    ("Quadratic trend", (0, 1, 2)),
    ("+ 1st-order AR", (3, 6)),
    ("+ 2nd-order AR", (4, 5, 7, 8)),
    ("+ seasonal terms", (9, 10, 11, 12, 13, 14)),
    ("+ log(dist)-trend int.", (15, 16, 17)),
    ("+ log(dist)-AR int.", (18, 19, 20)),
)


def eda_design(tensor: RecordTensor, basis: OrthoPolyBasis | None = None):
    """Full design and response over ``t = 2..T`` and all 365 days.

    Lags at days 1 and 2 read the previous year's last days.  Returns
    ``(X, y, t)`` with rows ordered by (year, day, site).
    """
    if tensor.dist_coast is None:
        raise ValueError("tensor carries no dist_coast")
    n, T, _ = tensor.shape
    basis = basis or build_ortho_poly(T)
    v, l1, l2 = _lag_views(tensor)
    tt = np.arange(2, T + 1)[:, None, None]
    dd = np.arange(1, N_DAYS + 1)[None, :, None]
    sl = (slice(None), slice(1, None), slice(None))
    X = design_matrix(tt, dd, l1[sl].transpose(1, 2, 0), l2[sl].transpose(1, 2, 0),
                      np.asarray(tensor.dist_coast)[None, None, :], basis)
    y = v[sl].transpose(1, 2, 0)
    t = np.broadcast_to(tt, y.shape)
    return X.reshape(-1, X.shape[-1]), y.ravel().astype(float), t.ravel()


def nested_model_table(tensor: RecordTensor) -> list[tuple[str, LogitFit]]:
    """AIC screening of nested fixed-effect logit models.

    Rows: stationary offset-only model, linear and quadratic trend, the
    successive covariate blocks of the full design, and a cubic trend.
    """
    X, y, t = eda_design(tensor)
    logt = np.log(t - 1.0)
    rows = [("Stationary", fit_logit_mle(np.zeros((y.size, 0)), y, offset=-logt)),
            ("Linear trend", fit_logit_mle(np.column_stack([np.ones_like(logt), logt]), y))]
    cols: list[int] = []
    for name, add in _NESTED_STEPS:
        cols.extend(add)
        rows.append((name, fit_logit_mle(X[:, cols], y)))
    # AIC is basis-invariant, so raw powers stand in for the cubic orthogonal basis
    c = logt - logt.mean()
    cubic = np.column_stack([np.ones_like(c), c, c ** 2, c ** 3])
    rows.append(("Cubic trend", fit_logit_mle(cubic, y)))
    return rows


def exclude_sites(tensor: RecordTensor, drop) -> RecordTensor:
    """Copy of ``tensor`` without the listed sites (region de-duplication)."""
    drop = {str(s) for s in drop}
    unknown = drop - set(tensor.sites)
    if unknown:
        raise KeyError(f"unknown sites {sorted(unknown)}")
    keep = [s for s in tensor.sites if s not in drop]
    if not keep:
        raise ValueError("cannot drop every site")
    return tensor.subset(keep)
