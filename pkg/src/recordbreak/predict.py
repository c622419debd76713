"""Kriging of spatial effects and posterior-predictive record indicators.

Grid rollouts run sequentially over ``(t, l)`` because each day's design
reads the two previously simulated indicators of the same cell; every step
is vectorised over posterior draws and grid cells.  Year 1 is all ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

from .design import build_ortho_poly, design_matrix, initial_design
from .mcmc import PosteriorDraws
from .records import N_DAYS, RecordTensor, expected_stationary_records, lagged

_EIG_TOL = 1e-10
_DAY_CHUNK = 32


@dataclass(frozen=True)
class PredictionGrid:
    """Target locations with planar coordinates (km) and coast distance."""

    cell_ids: Sequence[str]
    coords: np.ndarray
    dist_coast: np.ndarray
    block: Sequence[str] | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        dist = np.asarray(self.dist_coast, dtype=float).ravel()
        ids = tuple(str(c) for c in self.cell_ids)
        if coords.shape[0] == 0:
            raise ValueError("grid must contain at least one cell")
        if dist.shape != (coords.shape[0],) or len(ids) != coords.shape[0]:
            raise ValueError("cell_ids, coords and dist_coast must align")
        if not np.all(dist > 0):
            raise ValueError("dist_coast must be positive")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "dist_coast", dist)
        object.__setattr__(self, "cell_ids", ids)
        if self.block is not None:
            blk = tuple("" if b is None else str(b) for b in self.block)
            if len(blk) != len(ids):
                raise ValueError("block labels must align with cells")
            object.__setattr__(self, "block", blk)

    @property
    def size(self) -> int:
        return len(self.cell_ids)

    def block_mask(self, label: str) -> np.ndarray:
        if self.block is None:
            raise ValueError("grid has no block labels")
        return np.array([b == label for b in self.block])


@dataclass
class PredictiveField:
    """Simulated indicators, shape ``(n_draws, T, 365, n_cells)``.

    Year index 0 is ``t = 1``.  ``prob`` holds the matching record
    probabilities when requested (year 1 set to 1).
    """

    indicator: np.ndarray
    prob: np.ndarray | None = None
    grid: PredictionGrid | None = None
    draw_index: np.ndarray | None = field(default=None)

    @property
    def n_draws(self) -> int:
        return self.indicator.shape[0]

    @property
    def T(self) -> int:
        return self.indicator.shape[1]


# ---------------------------------------------------------------------------
# kriging


def exp_covariance(coords_a, coords_b, sigma0_sq: float, phi0: float) -> np.ndarray:
    """``sigma0_sq * exp(-phi0 * d)`` with Euclidean distances ``d`` in km."""
    if sigma0_sq < 0 or phi0 < 0:
        raise ValueError("sigma0_sq and phi0 must be non-negative")
    d = cdist(np.atleast_2d(coords_a), np.atleast_2d(coords_b))
    return sigma0_sq * np.exp(-phi0 * d)


def _psd_sqrt(C: np.ndarray, scale: float) -> np.ndarray:
    """Square-root factor of ``C``; eigenvalues below ``_EIG_TOL * scale`` are round-off."""
    e, V = np.linalg.eigh(0.5 * (C + C.T))
    cut = _EIG_TOL * scale
    e = np.where(e > cut, e, 0.0)
    return V * np.sqrt(e)


def kriging_operator(coords_obs, coords_tgt, sigma0_sq: float, phi0: float):
    """``(A, S)`` with conditional mean ``m + A (W - m)`` and noise ``S z``.

    ``A = C_ts C_ss^{-1}``; ``S S' = C_tt - C_ts C_ss^{-1} C_st``.
    """
    Css = exp_covariance(coords_obs, coords_obs, sigma0_sq, phi0)
    Cts = exp_covariance(coords_tgt, coords_obs, sigma0_sq, phi0)
    Ctt = exp_covariance(coords_tgt, coords_tgt, sigma0_sq, phi0)
    L = np.linalg.cholesky(Css)
    B = np.linalg.solve(L, Cts.T)  # L^{-1} C_st
    A = np.linalg.solve(L.T, B).T
    cov = Ctt - B.T @ B
    return A, _psd_sqrt(cov, sigma0_sq), cov


def krige_w(W_obs, mean, coords_obs, coords_tgt, sigma0_sq: float, phi0: float,
            rng: np.random.Generator | None = None, return_moments: bool = False):
    """Conditional-normal draw of a GP surface at target locations.

    Parameters
    ----------
    W_obs : array_like, shape (..., n)
        Observed values (several days may be stacked on leading axes).
    mean : float or array_like broadcasting to ``W_obs.shape[:-1]``
        Prior mean of the surface.
    rng : numpy.random.Generator, optional
        When omitted only the conditional mean is returned.
    return_moments : bool
        Return ``(mean, cov)`` instead of a draw.
    """
    W_obs = np.asarray(W_obs, dtype=float)
    m = np.asarray(mean, dtype=float)[..., None]
    A, S, cov = kriging_operator(coords_obs, coords_tgt, sigma0_sq, phi0)
    cmean = m + (W_obs - m) @ A.T
    if return_moments:
        return cmean, cov
    if rng is None:
        return cmean
    z = rng.standard_normal(cmean.shape)
    return cmean + z @ S.T


# ---------------------------------------------------------------------------
# effects at new locations


class _EffectSampler:
    """Per-draw random effects of one block at new locations."""

    def __init__(self, draws: PosteriorDraws, block: str, coords: np.ndarray,
                 draw_idx: np.ndarray, rng: np.random.Generator):
        self.kind = (draws.spatial, draws.temporal)
        self.block = block
        self.days = draws.block_days(block)
        self.day_pos = {int(d): i for i, d in enumerate(self.days)}
        self.G = coords.shape[0]
        self.S = draw_idx.size
        self.rng = rng
        self.static = None
        if draws.temporal is not None:
            self.w = draws.flat(f"w_{block}")[draw_idx]
        if draws.spatial is None:
            return
        sig = draws.scalar("sigma0_sq", block)[draw_idx]
        phi = draws.flat("phi0")[draw_idx]
        W = draws.flat(f"W_{block}")[draw_idx]
        ops = [kriging_operator(draws.coords, coords, sig[i], phi[i]) for i in range(self.S)]
        self.A = np.stack([o[0] for o in ops])
        self.Sq = np.stack([o[1] for o in ops])
        if draws.spatial == "static":
            m0 = (draws.scalar("beta0", block)[draw_idx] if draws.temporal is None
                  else np.zeros(self.S))
            cm = m0[:, None] + np.einsum("sgn,sn->sg", self.A, W - m0[:, None])
            z = rng.standard_normal((self.S, self.G))
            self.static = cm + np.einsum("sgh,sh->sg", self.Sq, z)
        else:
            self.W = W

    def at(self, t: int, day: int) -> np.ndarray:
        """Effects ``(S, G)`` for year ``t >= 2`` and day ``day``."""
        if day not in self.day_pos:
            raise KeyError(f"no effects stored for day {day} in block {self.block}")
        ti, di = t - 2, self.day_pos[day]
        out = np.zeros((self.S, self.G))
        spatial, temporal = self.kind
        if spatial == "daily":
            W = self.W[:, ti, di, :]
            m = self.w[:, ti, di]
            cm = m[:, None] + np.einsum("sgn,sn->sg", self.A, W - m[:, None])
            z = self.rng.standard_normal((self.S, self.G))
            return cm + np.einsum("sgh,sh->sg", self.Sq, z)
        if spatial == "static":
            out += self.static
        if temporal == "day":
            out += self.w[:, ti, di][:, None]
        elif temporal == "year":
            out += self.w[:, ti][:, None]
        return out


def _select_draws(draws: PosteriorDraws, n_draws: int | None, rng) -> np.ndarray:
    total = draws.n_chains * draws.n_draws
    if n_draws is None or n_draws >= total:
        return np.arange(total)
    return np.sort(rng.choice(total, size=n_draws, replace=False))


def _block_for_day(draws: PosteriorDraws, day: int) -> str:
    if day <= 2:
        if not draws.initial_days:
            raise KeyError("draws carry no day-1/day-2 sub-models")
        return f"day{day}"
    return "main"


def _coef(draws: PosteriorDraws, block: str, draw_idx: np.ndarray):
    from .design import DESIGN_COLUMNS, INITIAL_COLUMNS
    full = DESIGN_COLUMNS if block == "main" else INITIAL_COLUMNS
    idx = np.array([full.index(c) for c in draws.columns[block]], dtype=int)
    return idx, draws.beta(block)[draw_idx]


def simulate_predictive(draws: PosteriorDraws, grid: PredictionGrid, rng: np.random.Generator,
                        t_max: int | None = None, n_draws: int | None = None,
                        keep_prob: bool = False) -> PredictiveField:
    """Dynamic posterior-predictive rollout of record indicators on a grid.

    Parameters
    ----------
    draws : PosteriorDraws
        Fitted on all 365 days (days 1, 2 through the sub-models).
    grid : PredictionGrid
    rng : numpy.random.Generator
    t_max : int, optional
        Last simulated year (default ``draws.T``).
    n_draws : int, optional
        Number of posterior draws to use (random subset without replacement).
    keep_prob : bool
        Also return the per-step probabilities.
    """
    T = draws.T if t_max is None else int(t_max)
    if not 1 <= T <= draws.T:
        raise ValueError(f"t_max must lie in 1..{draws.T}")
    draw_idx = _select_draws(draws, n_draws, rng)
    S, G = draw_idx.size, grid.size
    ind = np.zeros((S, T, N_DAYS, G), dtype=np.int8)
    ind[:, 0] = 1
    prob = np.ones((S, T, N_DAYS, G)) if keep_prob else None
    if T == 1:
        return PredictiveField(ind, prob, grid, draw_idx)
    if draws.model == "M0":
        for t in range(2, T + 1):
            p = np.full((S, N_DAYS, G), 1.0 / t)
            ind[:, t - 1] = rng.random(p.shape) < p
            if keep_prob:
                prob[:, t - 1] = p
        return PredictiveField(ind, prob, grid, draw_idx)
    main_days = set(int(d) for d in draws.main_days)
    if not draws.initial_days or main_days != set(range(3, N_DAYS + 1)):
        raise KeyError("grid rollouts need effects for every day of the year")
    basis = build_ortho_poly(draws.T)
    blocks = draws.blocks
    effects = {b: _EffectSampler(draws, b, grid.coords, draw_idx, rng) for b in blocks}
    coefs = {b: _coef(draws, b, draw_idx) for b in blocks}
    dist = grid.dist_coast[None, :]
    prev1 = np.ones((S, G))
    prev2 = np.ones((S, G))
    for t in range(2, T + 1):
        for day in range(1, N_DAYS + 1):
            b = _block_for_day(draws, day)
            if b == "main":
                x = design_matrix(t, day, prev1, prev2, dist, basis)
            else:
                x = initial_design(t, prev1, basis)
            idx, beta = coefs[b]
            xs = draws.scaling[b].apply(x)[..., idx]
            eta = np.einsum("sgp,sp->sg", xs, beta) + effects[b].at(t, day)
            p = expit(eta)
            cur = (rng.random((S, G)) < p).astype(np.int8)
            ind[:, t - 1, day - 1] = cur
            if keep_prob:
                prob[:, t - 1, day - 1] = p
            prev2, prev1 = prev1, cur.astype(float)
    return PredictiveField(ind, prob, grid, draw_idx)


def one_step_ahead(draws: PosteriorDraws, holdout: RecordTensor, rng: np.random.Generator,
                   n_draws: int | None = None, reduce: str | None = None) -> np.ndarray:
    """Posterior samples of ``p_tl(s)`` at hold-out sites using observed lags.

    Tied observed lags are resolved per draw as 1 with probability ``1/r``.

    Parameters
    ----------
    reduce : {None, "mean"}
        ``"mean"`` streams the posterior mean instead of keeping every draw.

    Returns
    -------
    ndarray, shape (n_draws, T - 1, 365, n_holdout)
        Probabilities for years ``2..T``; days outside the fitted model are
        ``nan``.  The leading axis is dropped when ``reduce="mean"``.
    """
    if reduce not in (None, "mean"):
        raise ValueError(f"unknown reduce {reduce!r}")
    if holdout.coords is None or holdout.dist_coast is None:
        raise ValueError("hold-out tensor must carry coords and dist_coast")
    n_h, T, _ = holdout.shape
    if T != draws.T:
        raise ValueError("hold-out tensor must span the fitted years")
    draw_idx = _select_draws(draws, n_draws, rng)
    S = draw_idx.size
    if draws.model == "M0":
        p = np.broadcast_to((1.0 / np.arange(2, T + 1))[:, None, None], (T - 1, N_DAYS, n_h))
        return p.copy() if reduce else np.broadcast_to(p, (S,) + p.shape).copy()
    out = np.full((T - 1, N_DAYS, n_h) if reduce else (S, T - 1, N_DAYS, n_h), np.nan)
    if reduce:
        modelled = np.concatenate([draws.block_days(b) for b in draws.blocks]) - 1
        out[:, modelled] = 0.0
    basis = build_ortho_poly(T)
    coords = np.asarray(holdout.coords, dtype=float)
    dist = np.asarray(holdout.dist_coast, dtype=float)
    base = holdout.values("exclude")
    tied = holdout.tied
    r = holdout.tie_r[tied].astype(float)
    tt = np.arange(2, T + 1)
    for b in draws.blocks:
        days_all = draws.block_days(b)
        eff = _EffectSampler(draws, b, coords, draw_idx, rng)
        idx, beta = _coef(draws, b, draw_idx)
        for s in range(S):
            V = base.copy()
            V[tied] = rng.random(r.size) < 1.0 / r
            lag1, lag2 = lagged(V, 1)[:, 1:], lagged(V, 2)[:, 1:]
            effects = _stacked_effects(eff, s, tt, days_all)
            for lo in range(0, days_all.size, _DAY_CHUNK):
                days = days_all[lo:lo + _DAY_CHUNK]
                l1 = lag1[:, :, days - 1].transpose(1, 2, 0)
                if b == "main":
                    l2 = lag2[:, :, days - 1].transpose(1, 2, 0)
                    x = design_matrix(tt[:, None, None], days[None, :, None], l1, l2,
                                      dist[None, None, :], basis)
                else:
                    x = initial_design(tt[:, None, None], l1, basis)
                eta = draws.scaling[b].apply(x)[..., idx] @ beta[s]
                eta += effects[:, lo:lo + _DAY_CHUNK]
                if reduce:
                    out[:, days - 1, :] += expit(eta) / S
                else:
                    out[s][:, days - 1, :] = expit(eta)
    return out


def _stacked_effects(eff: _EffectSampler, s: int, tt: np.ndarray, days: np.ndarray) -> np.ndarray:
    """Effects of draw ``s`` for all ``(t, day)``, shape ``(T-1, D, G)``."""
    spatial, temporal = eff.kind
    Tm1, D, G = tt.size, days.size, eff.G
    if spatial == "daily":
        W = eff.W[s]  # (T-1, D, n)
        m = eff.w[s][..., None]
        cm = m + (W - m) @ eff.A[s].T
        z = eff.rng.standard_normal((Tm1, D, G))
        return cm + z @ eff.Sq[s].T
    out = np.zeros((Tm1, D, G))
    if spatial == "static":
        out += eff.static[s][None, None, :]
    if temporal == "day":
        out += eff.w[s][:, :, None]
    elif temporal == "year":
        out += eff.w[s][:, None, None]
    return out


# ---------------------------------------------------------------------------
# summaries


def _check_window(field: PredictiveField, t1: int, t2: int, l1: int, l2: int):
    if not 1 <= t1 <= t2 <= field.T:
        raise ValueError(f"need 1 <= t1 <= t2 <= {field.T}")
    if not 1 <= l1 <= l2 <= N_DAYS:
        raise ValueError("need 1 <= l1 <= l2 <= 365")


def nbar(field: PredictiveField, t1: int, t2: int, l1: int = 1, l2: int = N_DAYS,
         cell=None) -> np.ndarray:
    """Average over days of the number of records in years ``t1..t2``.

    Returns per-draw values, shape ``(n_draws,)`` for one cell or
    ``(n_draws, n_cells)`` when ``cell`` is None.
    """
    _check_window(field, t1, t2, l1, l2)
    I = field.indicator[:, t1 - 1:t2, l1 - 1:l2]
    out = I.sum(axis=(1, 2), dtype=np.int64) / float(l2 - l1 + 1)
    return out if cell is None else out[:, cell]


def ratio(field: PredictiveField, t1: int, t2: int, l1: int = 1, l2: int = N_DAYS,
          cell=None) -> np.ndarray:
    """``nbar`` over its expectation under a stationary climate."""
    return nbar(field, t1, t2, l1, l2, cell) / expected_stationary_records(t1, t2)


def _block_mask(field: PredictiveField, block) -> np.ndarray:
    G = field.indicator.shape[-1]
    if block is None:
        mask = np.ones(G, dtype=bool)
    elif isinstance(block, str):
        mask = field.grid.block_mask(block)
    else:
        mask = np.zeros(G, dtype=bool)
        mask[np.asarray(block)] = True
        if np.asarray(block).dtype == bool:
            mask = np.asarray(block, dtype=bool)
    if not mask.any():
        raise ValueError("block is empty")
    return mask


def ers(field: PredictiveField, t: int, day: int, block=None) -> np.ndarray:
    """Share of block cells breaking a record on day ``day`` of year ``t``."""
    _check_window(field, t, t, day, day)
    mask = _block_mask(field, block)
    return field.indicator[:, t - 1, day - 1][:, mask].mean(axis=-1)


def ers_bar(field: PredictiveField, t: int, days=None, block=None) -> np.ndarray:
    """``ers`` averaged over a set of days (default the whole year)."""
    days = np.arange(1, N_DAYS + 1) if days is None else np.asarray(days, dtype=int)
    if days.size == 0 or days.min() < 1 or days.max() > N_DAYS:
        raise ValueError("days must be a non-empty subset of 1..365")
    _check_window(field, t, t, 1, 1)
    mask = _block_mask(field, block)
    return field.indicator[:, t - 1][:, days - 1][:, :, mask].mean(axis=(1, 2))


def area_fraction_exceeding(stat, threshold: float, mode: str = "mean"):
    """Fraction of cells whose statistic exceeds ``threshold``.

    ``stat`` is ``(n_draws, n_cells)``.  ``mode="mean"`` thresholds the
    posterior mean, ``"q05"`` the pointwise 5% quantile (significant
    exceedance), and ``"draws"`` returns one fraction per draw.
    """
    stat = np.asarray(stat, dtype=float)
    if stat.ndim != 2 or stat.shape[1] == 0:
        raise ValueError("stat must be (n_draws, n_cells) with at least one cell")
    if mode == "mean":
        return float(np.mean(stat.mean(axis=0) > threshold))
    if mode == "q05":
        return float(np.mean(np.quantile(stat, 0.05, axis=0) > threshold))
    if mode == "draws":
        return np.mean(stat > threshold, axis=1)
    raise ValueError(f"unknown mode {mode!r}")


def summarize(samples, axis: int = 0) -> dict[str, np.ndarray]:
    """Posterior mean and 90% interval along ``axis``."""
    x = np.asarray(samples, dtype=float)
    return {"mean": x.mean(axis=axis), "q05": np.quantile(x, 0.05, axis=axis),
            "q95": np.quantile(x, 0.95, axis=axis)}
