"""Exact low-level samplers used by the Gibbs engine.

Every function takes an explicit :class:`numpy.random.Generator`; nothing here
touches global random state, so identical streams give identical draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

KS_SPLIT = 0.75
KS_MEAN = np.sqrt(np.pi / 2.0) * np.log(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)
_PI2 = np.pi ** 2
_SERIES_TOL = 1e-15
TN_REJECTION_THRESHOLD = 0.4
TN_EMPTY_BOUND = 38.0


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky failed even after the maximum jitter."""


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov distribution


def ks_cdf(x) -> np.ndarray:
    """Asymptotic Kolmogorov-Smirnov cdf, switching series at ``KS_SPLIT``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    small = pos & (x < KS_SPLIT)
    large = x >= KS_SPLIT
    if small.any():
        xs = x[small]
        n = np.arange(1, 30)[:, None]
        out[small] = _SQRT2PI / xs * np.exp(-((2 * n - 1) ** 2) * _PI2 / (8 * xs ** 2)).sum(0)
    if large.any():
        xl = x[large]
        n = np.arange(1, 30)[:, None]
        out[large] = 1 - 2 * (((-1.0) ** (n - 1)) * np.exp(-2 * n ** 2 * xl ** 2)).sum(0)
    return out


def _ks_left(m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` draws from the KS law restricted to ``(0, KS_SPLIT)``."""
    y0 = _PI2 / (8 * KS_SPLIT ** 2)
    rate = 1.0 - 0.5 / y0
    out = np.empty(m)
    filled = 0
    while filled < m:
        k = m - filled
        # envelope p1 is Gamma(3/2) truncated to y >= y0 under x = pi / sqrt(8 y);
        # draw it from a shifted exponential whose ratio peaks at y0
        z = rng.standard_exponential(k) / rate
        y = y0 + z
        ok = np.log(rng.random(k)) <= 0.5 * np.log(y / y0) - (1.0 - rate) * z
        y = y[ok]
        k = y.size
        x = np.pi / np.sqrt(8.0 * y)
        u = rng.random(k)
        # series relative to p1: 1 - q1 + p2 - q2 + ...
        x2 = x * x
        q_ratio = 4.0 * x2 / _PI2
        s = 1.0 - q_ratio
        accept = u <= s  # lower bound after an odd number of terms
        undecided = ~accept
        n = 2
        while undecided.any():
            e = np.exp(-((2 * n - 1) ** 2 - 1) * _PI2 / (8.0 * x2))
            p_n = (2 * n - 1) ** 2 * e
            s_up = s + p_n
            # u above an upper partial sum is a rejection
            undecided &= u <= s_up
            s = s_up - q_ratio * e
            newly = undecided & (u <= s)
            accept |= newly
            undecided &= ~newly
            if np.all(p_n[undecided] < _SERIES_TOL):
                undecided[:] = False
            n += 1
        got = x[accept]
        take = min(got.size, m - filled)
        out[filled:filled + take] = got[:take]
        filled += take
    return out


def _ks_right(m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` draws from the KS law restricted to ``[KS_SPLIT, inf)``."""
    out = np.empty(m)
    filled = 0
    while filled < m:
        k = m - filled
        x = np.sqrt(KS_SPLIT ** 2 + rng.standard_exponential(k) / 2.0)
        u = rng.random(k)
        # series relative to a1 = 8 x exp(-2 x^2): sum (-1)^(n+1) n^2 exp(-2 (n^2-1) x^2)
        x2 = x * x
        s = np.ones(k)
        accept = np.zeros(k, dtype=bool)
        undecided = np.ones(k, dtype=bool)
        n = 2
        while undecided.any():
            term = n * n * np.exp(-2.0 * (n * n - 1) * x2)
            if n % 2 == 0:
                s = s - term
                newly = undecided & (u <= s)
                accept |= newly
                undecided &= ~newly
            else:
                s = s + term
                undecided &= u <= s
            if np.all(term[undecided] < _SERIES_TOL):
                undecided[:] = False
            n += 1
        got = x[accept]
        take = min(got.size, m - filled)
        out[filled:filled + take] = got[:take]
        filled += take
    return out


_P_LEFT = float(ks_cdf(np.array([KS_SPLIT]))[0])


def sample_ks(rng: np.random.Generator, size=None):
    """Exact draws from the asymptotic Kolmogorov-Smirnov distribution.

    Alternating-series rejection; the density itself is never evaluated.
    The support is split at ``KS_SPLIT`` with the small-argument (theta
    function) series on the left and the usual series on the right.

    Parameters
    ----------
    rng : numpy.random.Generator
    size : int or tuple, optional
        Output shape; a float is returned when omitted.
    """
    shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
    m = int(np.prod(shape))
    left = rng.random(m) < _P_LEFT
    out = np.empty(m)
    nl = int(left.sum())
    if nl:
        out[left] = _ks_left(nl, rng)
    if m - nl:
        out[~left] = _ks_right(m - nl, rng)
    if size is None:
        return float(out[0])
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Truncated normal


def _tn_tail(alpha: np.ndarray, beta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal on ``(alpha, beta)`` with ``alpha > 0`` by rejection."""
    out = np.empty(alpha.shape)
    todo = np.arange(alpha.size)
    while todo.size:
        a, b = alpha[todo], beta[todo]
        narrow = (b - a) < 1.0 / a
        z = np.empty(todo.size)
        lam = 0.5 * (a + np.sqrt(a * a + 4.0))
        z[~narrow] = a[~narrow] + rng.standard_exponential(int((~narrow).sum())) / lam[~narrow]
        z[narrow] = a[narrow] + (b[narrow] - a[narrow]) * rng.random(int(narrow.sum()))
        u = rng.random(todo.size)
        logr = np.where(narrow, 0.5 * (a * a - z * z), -0.5 * (z - lam) ** 2)
        ok = (np.log(u) <= logr) & (z <= b)
        out[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def sample_truncated_normal(mean, var, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Draws from ``N(mean, var)`` restricted to ``(lower, upper)``.

    Inverse-cdf sampling in the central region and exponential (or uniform)
    envelope rejection once the standardised interval starts beyond
    ``TN_REJECTION_THRESHOLD`` on either side.  Arguments broadcast.

    Raises
    ------
    ValueError
        If ``var <= 0``, ``lower >= upper`` or the interval lies entirely
        beyond 38 standard deviations.
    """
    mean, var, lower, upper = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(var, dtype=float),
        np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))
    scalar = mean.ndim == 0
    shape = mean.shape
    mean, var, lower, upper = (np.atleast_1d(v).ravel() for v in (mean, var, lower, upper))
    if np.any(~(var > 0)):
        raise ValueError("variance must be positive")
    if np.any(~(lower < upper)):
        raise ValueError("truncation interval must satisfy lower < upper")
    sd = np.sqrt(var)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    if np.any((a > TN_EMPTY_BOUND) | (b < -TN_EMPTY_BOUND)):
        raise ValueError("truncation interval is numerically empty (beyond 38 sd)")
    z = np.empty(a.shape)
    right = a > TN_REJECTION_THRESHOLD
    left = b < -TN_REJECTION_THRESHOLD
    mid = ~(right | left)
    if right.any():
        z[right] = _tn_tail(a[right], b[right], rng)
    if left.any():
        z[left] = -_tn_tail(-b[left], -a[left], rng)
    if mid.any():
        am, bm = a[mid], b[mid]
        u = rng.random(am.size)
        # work in whichever tail keeps the cdf values away from 1
        flip = am > 0
        lo = np.where(flip, special.ndtr(-bm), special.ndtr(am))
        hi = np.where(flip, special.ndtr(-am), special.ndtr(bm))
        v = special.ndtri(lo + u * (hi - lo))
        v = np.where(flip, -v, v)
        z[mid] = np.clip(v, am, bm)
    out = mean + sd * z
    return float(out[0]) if scalar else out.reshape(shape)


# ---------------------------------------------------------------------------
# Gaussian helpers


def robust_cholesky(matrix, name: str = "matrix", max_jitter: float = 1e-6) -> np.ndarray:
    """Lower Cholesky factor with escalating diagonal jitter.

    Jitter starts at ``1e-10 * mean(diag)`` and grows by 10x up to
    ``max_jitter * mean(diag)``.  Works on a single matrix or a stack.
    """
    A = np.asarray(matrix, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    if A.ndim > 2:
        flat = A.reshape(-1, *A.shape[-2:])
        return np.stack([robust_cholesky(m, name, max_jitter) for m in flat]).reshape(A.shape)
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale) or scale <= 0:
        raise FactorizationError(f"Cholesky of {name} failed: non-positive diagonal")
    jitter = 1e-10
    eye = np.eye(A.shape[0])
    while jitter <= max_jitter * (1 + 1e-9):
        try:
            return np.linalg.cholesky(A + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError(f"Cholesky of {name} failed after jitter {max_jitter:g}")


def sample_mvn(mean, cov, rng: np.random.Generator, name: str = "covariance") -> np.ndarray:
    """One draw ``mean + L z`` with ``L`` the (jittered) lower Cholesky factor."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    L = robust_cholesky(np.atleast_2d(cov), name)
    return mean + L @ rng.standard_normal(mean.shape[0])


def sample_mvn_precision(b, Q, rng: np.random.Generator, name: str = "precision") -> np.ndarray:
    """Draw from ``N(Q^{-1} b, Q^{-1})`` using a Cholesky factor of ``Q``.

    ``b`` may have shape ``(..., k)`` and ``Q`` shape ``(..., k, k)``; the
    leading axes are independent problems solved in one batched call.
    """
    b = np.asarray(b, dtype=float)
    L = robust_cholesky(Q, name)
    z = rng.standard_normal(b.shape)
    # mean: L L' m = b; noise: L' e = z
    h = np.linalg.solve(L, b[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), h + z[..., None])[..., 0]


def sample_gamma(shape, rate, rng: np.random.Generator, size=None):
    """Gamma draw with the given shape and rate (numpy's generator)."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise ValueError("gamma shape and rate must be positive")
    return rng.gamma(shape, 1.0 / rate, size=size)


def sample_inverse_gamma(shape, scale, rng: np.random.Generator, size=None):
    """Inverse-gamma draw: reciprocal of ``Gamma(shape, rate=scale)``."""
    return 1.0 / sample_gamma(shape, scale, rng, size=size)


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis


@dataclass
class AdaptiveRWState:
    """State of a random-walk Metropolis kernel with batch adaptation.

    ``value`` is the parameter on its natural scale.  With ``log_scale``
    the walk runs on ``log(value)`` and the target picks up the Jacobian.
    """

    value: float
    log_sd: float = 0.0
    target_rate: float = 0.33
    batch_size: int = 50
    log_scale: bool = True
    frozen: bool = False
    n_batches: int = 0
    batch_accepts: int = 0
    batch_count: int = 0
    n_accept: int = 0
    n_total: int = 0

    @property
    def proposal_sd(self) -> float:
        return float(np.exp(self.log_sd))

    @property
    def acceptance_rate(self) -> float:
        return self.n_accept / self.n_total if self.n_total else float("nan")

    def freeze(self) -> None:
        """Stop adapting and reset the acceptance counters."""
        self.frozen = True
        self.n_accept = 0
        self.n_total = 0


def adaptive_rw_step(state: AdaptiveRWState, log_target: Callable[[float], float],
                     rng: np.random.Generator) -> AdaptiveRWState:
    """One Metropolis update of ``state`` in place; returns ``state``.

    Proposal sd moves by ``min(0.1, n_batches ** -0.5)`` on the log scale
    after each batch, up when the batch acceptance beat the target and down
    otherwise.  A proposal whose target is non-finite is rejected.

    Raises
    ------
    ValueError
        If the target is not finite at the current value.
    """
    # the target may depend on other blocks that moved since the last call
    cur = float(log_target(state.value))
    if not np.isfinite(cur):
        raise ValueError("log target is not finite at the current state")
    step = state.proposal_sd * rng.standard_normal()
    if state.log_scale:
        prop = state.value * np.exp(step)
        jac = np.log(prop) - np.log(state.value)
    else:
        prop = state.value + step
        jac = 0.0
    u = rng.random()
    try:
        new = float(log_target(prop))
    except np.linalg.LinAlgError:
        new = -np.inf
    accepted = bool(np.isfinite(new) and np.log(u) < new - cur + jac)
    if accepted:
        state.value = float(prop)
    state.n_total += 1
    state.n_accept += accepted
    if not state.frozen:
        state.batch_count += 1
        state.batch_accepts += accepted
        if state.batch_count == state.batch_size:
            state.n_batches += 1
            delta = min(0.1, state.n_batches ** -0.5)
            rate = state.batch_accepts / state.batch_size
            state.log_sd += delta if rate > state.target_rate else -delta
            state.batch_count = 0
            state.batch_accepts = 0
    return state
