"""Data-augmentation Gibbs sampler for the record-probability models M0-M5.

The logit link is represented through latent ``Y = eta + e`` with
``e ~ N(0, lambda)``, ``lambda = (2K)^2`` and ``K`` Kolmogorov-Smirnov, so all
regression and random-effect updates are conjugate.  Each sweep runs, in
order: tie refresh, latent ``Y``, ``lambda``, ``beta``, spatial effects,
temporal means and centring intercepts, the decay ``phi0`` and the
variances.

The data split into up to three blocks sharing ``phi0``: the main model for
days ``>= 3`` and reduced sub-models for days 1 and 2, each with its own
coefficients, intercept and variances.

Model variants differ only in which random-effect components are active:

====  =================  ==================
name  spatial effect     temporal intercept
====  =================  ==================
M0    closed form ``eta = -log(t - 1)``
M1    none               none
M2    ``w(s)``           none
M3    ``w(s)``           ``w_t``
M4    ``w(s)``           ``w_tl``
M5    ``W_tl(s)``        ``w_tl`` (GP mean)
====  =================  ==================

The intercept sits in ``beta`` only for M1; otherwise it is the centring
parameter ``beta0`` (the mean of the temporal intercepts, or of ``w(s)`` in
M2).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.special import log_expit
from scipy.spatial.distance import cdist, pdist

from .design import (DESIGN_COLUMNS, INITIAL_COLUMNS, ScalingSpec, build_ortho_poly,
                     design_matrix, fit_scaling, initial_design, panel_design)
from .records import N_DAYS, RecordTensor, lagged
from .samplers import (AdaptiveRWState, adaptive_rw_step, robust_cholesky, sample_gamma,
                       sample_ks, sample_mvn_precision, sample_truncated_normal)

VARIANTS: dict[str, tuple[str | None, str | None]] = {
    "M0": (None, None),
    "M1": (None, None),
    "M2": ("static", None),
    "M3": ("static", "year"),
    "M4": ("static", "day"),
    "M5": ("daily", "day"),
}
BLOCKS = ("main", "day1", "day2")
_W_CHUNK = 2048


class GibbsStepError(RuntimeError):
    """A Gibbs step failed; the message names the sweep and step."""


@dataclass(frozen=True)
class ModelSpec:
    """Model variant, priors and chain settings.

    Priors: ``beta ~ N(mu_beta, sd_beta^2 I)`` (the centring intercepts use
    the same normal), ``1/sigma^2 ~ Gamma(a_sigma, rate=b_sigma)`` for every
    variance, ``phi0 ~ Gamma(a_phi, rate=b_phi)``.

    ``days`` lists the main-model days (default 3..365); ``initial_days``
    adds the day-1 and day-2 sub-models.  ``phi_init`` defaults to three over
    the median inter-site distance.
    """

    variant: str = "M5"
    mu_beta: float = 0.0
    sd_beta: float = 100.0
    a_sigma: float = 2.0
    b_sigma: float = 1.0
    a_phi: float = 2.0
    b_phi: float = 1.0
    n_iter: int = 2000
    burn_in: int = 1000
    thin: int = 1
    n_chains: int = 2
    seed: int = 0
    days: tuple[int, ...] | None = None
    initial_days: bool = True
    phi_init: float | None = None
    phi_proposal_sd: float = 0.1
    keep_fields: bool = True
    keep_latent: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        for name in ("sd_beta", "a_sigma", "b_sigma", "a_phi", "b_phi", "phi_proposal_sd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_iter < 1 or not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be >= 1")
        if self.days is not None:
            d = tuple(int(x) for x in self.days)
            if not d or min(d) < 3 or max(d) > N_DAYS or len(set(d)) != len(d):
                raise ValueError("main-model days must be distinct values in 3..365")
            object.__setattr__(self, "days", tuple(sorted(d)))
        if self.phi_init is not None and not self.phi_init > 0:
            raise ValueError("phi_init must be positive")

    @property
    def spatial(self) -> str | None:
        return VARIANTS[self.variant][0]

    @property
    def temporal(self) -> str | None:
        return VARIANTS[self.variant][1]

    @property
    def main_days(self) -> np.ndarray:
        return np.arange(3, N_DAYS + 1) if self.days is None else np.asarray(self.days)

    @property
    def n_kept(self) -> int:
        return len(range(self.burn_in, self.n_iter, self.thin))

    def to_dict(self) -> dict[str, Any]:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["days"] = None if self.days is None else list(self.days)
        return out


# ---------------------------------------------------------------------------
# data blocks


@dataclass
class Block:
    """Design and responses for one sub-model, laid out ``(T-1, D, n, ...)``."""

    name: str
    days: np.ndarray
    X: np.ndarray
    ind: np.ndarray
    tie_r: np.ndarray
    columns: tuple[str, ...]
    col_idx: np.ndarray
    scaling: ScalingSpec
    refresh: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.ind.shape

    @property
    def tied(self) -> np.ndarray:
        return self.tie_r >= 2

    def raw_rows(self, t, day, lag1, lag2, dist, basis) -> np.ndarray:
        if self.name == "main":
            return design_matrix(t, day, lag1, lag2, dist, basis)
        return initial_design(t, lag1, basis)


def build_blocks(tensor: RecordTensor, spec: ModelSpec) -> dict[str, Block]:
    """Scaled designs for every sub-model in ``spec``.

    Scaling constants come from the design with tied indicators set to 0
    and stay fixed for the whole run.
    """
    if tensor.dist_coast is None:
        raise ValueError("tensor carries no dist_coast")
    n, T, _ = tensor.shape
    basis = build_ortho_poly(T)
    V = tensor.values("exclude")
    dist = np.asarray(tensor.dist_coast, dtype=float)
    raw = panel_design(V, dist, basis, spec.main_days)
    tied = tensor.tied.astype(np.int8)
    lag_tied = (lagged(tied, 1) + lagged(tied, 2)) > 0
    lag1_tied = lagged(tied, 1) > 0
    centred = spec.variant != "M1"
    layout = [("main", spec.main_days, raw["main"], DESIGN_COLUMNS, lag_tied)]
    if spec.initial_days:
        layout += [("day1", np.array([1]), raw["day1"][:, None], INITIAL_COLUMNS, lag1_tied),
                   ("day2", np.array([2]), raw["day2"][:, None], INITIAL_COLUMNS, lag1_tied)]
    blocks = {}
    for name, days, Xraw, cols, affected in layout:
        p = Xraw.shape[-1]
        scaling = fit_scaling(Xraw.reshape(-1, p), intercept=True)
        col_idx = np.arange(1 if centred else 0, p)
        X = np.ascontiguousarray(scaling.apply(Xraw)[..., col_idx])
        sel = (slice(None), slice(1, None), days - 1)
        ind = np.transpose(V[sel], (1, 2, 0)).astype(float)
        tie_r = np.transpose(tensor.tie_r[sel], (1, 2, 0))
        refresh = np.nonzero(np.transpose(affected[sel], (1, 2, 0)))
        blocks[name] = Block(name, days, X, ind, tie_r, tuple(cols[i] for i in col_idx),
                             col_idx, scaling, refresh)
    return blocks


# ---------------------------------------------------------------------------
# vectorised full conditionals (usable on bare arrays)


def resample_tied_indicators(values: np.ndarray, tie_r: np.ndarray,
                             rng: np.random.Generator) -> np.ndarray:
    """Set every r-tied cell to 1 with probability ``1/r``, in place."""
    tied = tie_r >= 2
    if tied.any():
        r = tie_r[tied].astype(float)
        values[tied] = (rng.random(r.size) < 1.0 / r).astype(values.dtype)
    return values


def latent_step(eta: np.ndarray, lam: np.ndarray, ind: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """``Y ~ TN(eta, lam)`` on ``(0, inf)`` where ``ind == 1``, else ``(-inf, 0)``."""
    pos = ind > 0.5
    lower = np.where(pos, 0.0, -np.inf)
    upper = np.where(pos, np.inf, 0.0)
    return sample_truncated_normal(eta, lam, lower, upper, rng)


def lambda_step(resid: np.ndarray, lam: np.ndarray, rng: np.random.Generator):
    """Independence Metropolis update of ``lambda`` with KS proposals.

    The proposal is the prior, so the ratio is the normal likelihood ratio
    ``N(e; 0, lam*) / N(e; 0, lam)``.  Returns ``(lam_new, n_accepted)``.
    """
    k = sample_ks(rng, size=resid.shape) if resid.ndim else sample_ks(rng)
    prop = 4.0 * np.square(k)
    e2 = np.square(resid)
    log_ratio = -0.5 * (np.log(prop) - np.log(lam)) - 0.5 * e2 * (1.0 / prop - 1.0 / lam)
    accept = np.log(rng.random(np.shape(resid))) < log_ratio
    return np.where(accept, prop, lam), int(np.sum(accept))


def beta_step(X: np.ndarray, r: np.ndarray, lam: np.ndarray, mu: float, sd: float,
              rng: np.random.Generator) -> np.ndarray:
    """Normal full conditional of regression coefficients.

    ``X`` is ``(N, p)``, ``r`` the working response ``Y - effects`` and
    ``lam`` the latent variances, both ``(N,)``.
    """
    w = 1.0 / lam
    Xw = X * w[:, None]
    P = X.T @ Xw + np.eye(X.shape[1]) / sd ** 2
    b = Xw.T @ r + mu / sd ** 2
    return sample_mvn_precision(b, P, rng, name="beta precision")


# ---------------------------------------------------------------------------
# chain state


@dataclass
class BlockState:
    beta: np.ndarray
    beta0: float = 0.0
    sigma0_sq: float = 1.0
    sigma1_sq: float = 1.0
    Y: np.ndarray | None = None
    lam: np.ndarray | None = None
    W: np.ndarray | None = None
    w: np.ndarray | None = None


@dataclass
class ChainState:
    """Current values of every block plus the shared decay ``phi``."""

    blocks: dict[str, BlockState]
    phi: AdaptiveRWState
    values: np.ndarray
    sweep: int = 0
    lam_accept: int = 0
    lam_total: int = 0


def _median_distance(coords: np.ndarray) -> float:
    d = pdist(coords)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def init_state(spec: ModelSpec, blocks: dict[str, Block], tensor: RecordTensor,
               overrides: dict | None = None) -> ChainState:
    """Initial values: zero effects and coefficients, unit variances.

    ``overrides`` maps ``"beta"``, ``"beta0"``, ``"sigma0_sq"``,
    ``"sigma1_sq"`` (applied to every block) and ``"phi"`` to starting
    values, for dispersed multi-chain starts.
    """
    overrides = overrides or {}
    n = tensor.shape[0]
    states = {}
    for name, blk in blocks.items():
        Tm1, D, _ = blk.shape
        p = blk.X.shape[-1]
        b_init = np.asarray(overrides.get("beta", 0.0), dtype=float)
        if name != "main" and b_init.ndim:
            b_init = np.zeros(p)  # vector overrides target the main block
        beta = np.broadcast_to(b_init, (p,)).copy()
        st = BlockState(beta=beta, beta0=float(overrides.get("beta0", 0.0)),
                        sigma0_sq=float(overrides.get("sigma0_sq", 1.0)),
                        sigma1_sq=float(overrides.get("sigma1_sq", 1.0)),
                        Y=np.zeros((Tm1, D, n)), lam=np.ones((Tm1, D, n)))
        if spec.spatial == "daily":
            st.W = np.full((Tm1, D, n), st.beta0)
        elif spec.spatial == "static":
            st.W = np.full(n, st.beta0 if spec.temporal is None else 0.0)
        if spec.temporal == "day":
            st.w = np.full((Tm1, D), st.beta0)
        elif spec.temporal == "year":
            st.w = np.full(Tm1, st.beta0)
        states[name] = st
    coords = np.asarray(tensor.coords, dtype=float)
    phi0 = overrides.get("phi", spec.phi_init or 3.0 / _median_distance(coords))
    phi = AdaptiveRWState(value=float(phi0), log_sd=float(np.log(spec.phi_proposal_sd)))
    return ChainState(states, phi, tensor.values("exclude").copy())


def _temporal(spec: ModelSpec, st: BlockState, shape) -> np.ndarray:
    """Temporal intercepts entering ``eta`` directly (not as a GP mean)."""
    if spec.temporal == "day" and spec.spatial != "daily":
        return np.broadcast_to(st.w[:, :, None], shape)
    if spec.temporal == "year":
        return np.broadcast_to(st.w[:, None, None], shape)
    return np.zeros(shape)


def _effects(spec: ModelSpec, st: BlockState, shape) -> np.ndarray:
    out = _temporal(spec, st, shape).copy()
    if spec.spatial == "daily":
        out += st.W
    elif spec.spatial == "static":
        out += st.W[None, None, :]
    return out


def _xbeta(blk: Block, st: BlockState) -> np.ndarray:
    return blk.X @ st.beta


def linear_predictor(spec: ModelSpec, blk: Block, st: BlockState) -> np.ndarray:
    return _xbeta(blk, st) + _effects(spec, st, blk.shape)


# ---------------------------------------------------------------------------
# sampler


class _Corr:
    """Cholesky of the exponential correlation matrix, cached per ``phi``."""

    def __init__(self, dist: np.ndarray):
        self.dist = dist
        self.phi = None

    def at(self, phi: float):
        if phi != self.phi:
            R = np.exp(-phi * self.dist)
            self.L = np.linalg.cholesky(R)
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.L))))
            eye = np.eye(R.shape[0])
            self.Rinv = np.linalg.solve(self.L.T, np.linalg.solve(self.L, eye))
            self.u = self.Rinv.sum(axis=1)  # R^{-1} 1
            self.c = float(self.u.sum())  # 1' R^{-1} 1
            self.phi = phi
        return self


def _quad(L: np.ndarray, E: np.ndarray) -> float:
    """Sum over rows of ``E`` (shape ``(m, n)``) of ``e' R^{-1} e``."""
    Z = np.linalg.solve(L, E.reshape(-1, L.shape[0]).T)
    return float(np.sum(Z * Z))


def phi_log_target(phi: float, dist: np.ndarray, blocks, a_phi: float, b_phi: float) -> float:
    """Log full conditional of ``phi0`` up to a constant.

    ``blocks`` holds ``(E, sigma0_sq)`` pairs where the rows of ``E`` are
    centred spatial surfaces sharing the correlation ``exp(-phi * dist)``.
    """
    if not phi > 0:
        return -np.inf
    L = np.linalg.cholesky(np.exp(-phi * dist))
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    out = (a_phi - 1.0) * np.log(phi) - b_phi * phi
    for E, sigma0_sq in blocks:
        reps = E.size // dist.shape[0]
        out += -0.5 * reps * logdet - 0.5 * _quad(L, E) / sigma0_sq
    return float(out)


def sample_gp_hyperparameters(E, coords, rng: np.random.Generator, n_iter: int = 2000,
                              burn_in: int = 1000, a_sigma: float = 2.0, b_sigma: float = 1.0,
                              a_phi: float = 2.0, b_phi: float = 1.0, phi_init: float | None = None,
                              sigma0_sq_init: float = 1.0) -> dict[str, np.ndarray]:
    """Posterior draws of ``(sigma0_sq, phi0)`` for fully observed centred surfaces.

    Runs the variance and decay updates of the Gibbs sampler alone; ``E``
    is ``(n_reps, n_sites)``.
    """
    E = np.atleast_2d(np.asarray(E, dtype=float))
    coords = np.asarray(coords, dtype=float)
    dist = cdist(coords, coords)
    corr = _Corr(dist)
    phi0 = phi_init or 3.0 / _median_distance(coords)
    phi = AdaptiveRWState(value=float(phi0), log_sd=float(np.log(0.1)))
    sig = float(sigma0_sq_init)
    out = {"sigma0_sq": [], "phi0": []}
    for it in range(n_iter):
        adaptive_rw_step(phi, lambda p: phi_log_target(p, dist, [(E, sig)], a_phi, b_phi), rng)
        q = _quad(corr.at(phi.value).L, E)
        sig = 1.0 / sample_gamma(E.size / 2.0 + a_sigma, 0.5 * q + b_sigma, rng)
        if it == burn_in - 1:
            phi.freeze()
        if it >= burn_in:
            out["sigma0_sq"].append(sig)
            out["phi0"].append(phi.value)
    res = {k: np.array(v) for k, v in out.items()}
    res["phi_acceptance"] = np.array(phi.acceptance_rate)
    return res


class GibbsSampler:
    """One chain of the Gibbs sampler over pre-built blocks."""

    def __init__(self, spec: ModelSpec, blocks: dict[str, Block], tensor: RecordTensor,
                 rng: np.random.Generator, overrides: dict | None = None):
        self.spec = spec
        self.blocks = blocks
        self.tensor = tensor
        self.rng = rng
        self.state = init_state(spec, blocks, tensor, overrides)
        coords = np.asarray(tensor.coords, dtype=float)
        self.corr = _Corr(cdist(coords, coords)) if spec.spatial else None
        self.basis = build_ortho_poly(tensor.shape[1])
        self.dist = np.asarray(tensor.dist_coast, dtype=float)
        self.has_ties = bool(np.any(tensor.tied))

    # step 1
    def step_ties(self):
        if not self.has_ties:
            return
        st = self.state
        resample_tied_indicators(st.values, self.tensor.tie_r, self.rng)
        l1 = lagged(st.values, 1)
        l2 = lagged(st.values, 2)
        for blk in self.blocks.values():
            sel = (slice(None), slice(1, None), blk.days - 1)
            blk.ind = np.transpose(st.values[sel], (1, 2, 0)).astype(float)
            ti, di, si = blk.refresh
            if ti.size == 0:
                continue
            t = ti + 2
            day = blk.days[di]
            rows = blk.raw_rows(t, day, l1[si, t - 1, day - 1], l2[si, t - 1, day - 1],
                                self.dist[si], self.basis)
            blk.X[ti, di, si] = blk.scaling.apply(rows)[:, blk.col_idx]

    # step 2
    def step_latent(self):
        for name, blk in self.blocks.items():
            st = self.state.blocks[name]
            st.Y = latent_step(linear_predictor(self.spec, blk, st), st.lam, blk.ind, self.rng)

    # step 3
    def step_lambda(self):
        for name, blk in self.blocks.items():
            st = self.state.blocks[name]
            resid = st.Y - linear_predictor(self.spec, blk, st)
            st.lam, acc = lambda_step(resid, st.lam, self.rng)
            self.state.lam_accept += acc
            self.state.lam_total += resid.size

    # step 4
    def step_beta(self):
        for name, blk in self.blocks.items():
            st = self.state.blocks[name]
            r = st.Y - _effects(self.spec, st, blk.shape)
            p = blk.X.shape[-1]
            st.beta = beta_step(blk.X.reshape(-1, p), r.ravel(), st.lam.ravel(),
                                self.spec.mu_beta, self.spec.sd_beta, self.rng)

    # step 5
    def step_spatial(self):
        spec = self.spec
        if spec.spatial is None:
            return
        C = self.corr.at(self.state.phi.value)
        for name, blk in self.blocks.items():
            st = self.state.blocks[name]
            Sinv = C.Rinv / st.sigma0_sq
            prior_pull = C.u / st.sigma0_sq  # Sigma_W^{-1} 1
            if spec.spatial == "daily":
                Tm1, D, n = blk.shape
                r = (st.Y - _xbeta(blk, st)).reshape(-1, n)
                lam = st.lam.reshape(-1, n)
                mean = st.w.reshape(-1)
                out = np.empty_like(r)
                idx = np.arange(n)
                for a in range(0, r.shape[0], _W_CHUNK):
                    sl = slice(a, a + _W_CHUNK)
                    Q = np.broadcast_to(Sinv, (lam[sl].shape[0], n, n)).copy()
                    Q[:, idx, idx] += 1.0 / lam[sl]
                    b = r[sl] / lam[sl] + mean[sl, None] * prior_pull[None, :]
                    out[sl] = sample_mvn_precision(b, Q, self.rng, name=f"W precision ({name})")
                st.W = out.reshape(Tm1, D, n)
            else:
                r = st.Y - _xbeta(blk, st) - _temporal(spec, st, blk.shape)
                winv = 1.0 / st.lam
                Q = Sinv + np.diag(winv.sum(axis=(0, 1)))
                m0 = st.beta0 if spec.temporal is None else 0.0
                b = (r * winv).sum(axis=(0, 1)) + m0 * prior_pull
                st.W = sample_mvn_precision(b, Q, self.rng, name=f"w(s) precision ({name})")

    # step 6
    def step_means(self):
        spec = self.spec
        mu0, v0 = spec.mu_beta, spec.sd_beta ** 2
        C = self.corr.at(self.state.phi.value) if spec.spatial else None
        for name, blk in self.blocks.items():
            st = self.state.blocks[name]
            if spec.temporal is not None:
                if spec.spatial == "daily":
                    prec = C.c / st.sigma0_sq + 1.0 / st.sigma1_sq
                    lin = (st.W @ C.u) / st.sigma0_sq + st.beta0 / st.sigma1_sq
                else:
                    r = st.Y - _xbeta(blk, st) - st.W[None, None, :]
                    winv = 1.0 / st.lam
                    axes = (2,) if spec.temporal == "day" else (1, 2)
                    prec = winv.sum(axis=axes) + 1.0 / st.sigma1_sq
                    lin = (r * winv).sum(axis=axes) + st.beta0 / st.sigma1_sq
                st.w = lin / prec + self.rng.standard_normal(np.shape(lin)) / np.sqrt(prec)
                prec0 = st.w.size / st.sigma1_sq + 1.0 / v0
                lin0 = st.w.sum() / st.sigma1_sq + mu0 / v0
            elif spec.spatial == "static":
                prec0 = C.c / st.sigma0_sq + 1.0 / v0
                lin0 = float(C.u @ st.W) / st.sigma0_sq + mu0 / v0
            else:
                continue
            st.beta0 = float(lin0 / prec0 + self.rng.standard_normal() / np.sqrt(prec0))

    def _spatial_resid(self, st: BlockState) -> np.ndarray:
        if self.spec.spatial == "daily":
            return st.W - st.w[..., None]
        m0 = st.beta0 if self.spec.temporal is None else 0.0
        return (st.W - m0)[None, :]

    # step 7
    def phi_log_target(self, phi: float) -> float:
        blocks = [(self._spatial_resid(st), st.sigma0_sq) for st in self.state.blocks.values()]
        return phi_log_target(phi, self.corr.dist, blocks, self.spec.a_phi, self.spec.b_phi)

    def step_phi(self):
        if self.spec.spatial is None:
            return
        adaptive_rw_step(self.state.phi, self.phi_log_target, self.rng)

    # step 8
    def step_variances(self):
        spec = self.spec
        a, b = spec.a_sigma, spec.b_sigma
        C = self.corr.at(self.state.phi.value) if spec.spatial else None
        for st in self.state.blocks.values():
            if spec.spatial is not None:
                E = self._spatial_resid(st)
                q = _quad(C.L, E)
                st.sigma0_sq = 1.0 / sample_gamma(E.size / 2.0 + a, 0.5 * q + b, self.rng)
            if spec.temporal is not None:
                d = st.w - st.beta0
                st.sigma1_sq = 1.0 / sample_gamma(d.size / 2.0 + a, 0.5 * float(d.ravel() @ d.ravel()) + b,
                                                  self.rng)

    STEPS = ("ties", "latent", "lambda", "beta", "spatial", "means", "phi", "variances")

    def sweep(self):
        for name in self.STEPS:
            try:
                getattr(self, f"step_{name}")()
            except Exception as exc:  # annotate and abort
                raise GibbsStepError(f"sweep {self.state.sweep}, step {name}: {exc}") from exc
        self.state.sweep += 1

    # -- retained quantities
    def scalar_values(self) -> dict[str, float]:
        spec = self.spec
        out = {}
        for name, blk in self.blocks.items():
            st = self.state.blocks[name]
            sfx = "" if name == "main" else f"_{name}"
            for col, v in zip(blk.columns, st.beta):
                out[f"beta{sfx}[{col}]"] = float(v)
            if spec.variant != "M1":
                out[f"beta0{sfx}"] = st.beta0
            if spec.spatial is not None:
                out[f"sigma0_sq{sfx}"] = st.sigma0_sq
            if spec.temporal is not None:
                out[f"sigma1_sq{sfx}"] = st.sigma1_sq
        if spec.spatial is not None:
            out["phi0"] = self.state.phi.value
        return out

    def field_values(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.blocks:
            st = self.state.blocks[name]
            if st.W is not None:
                out[f"W_{name}"] = st.W.copy()
            if st.w is not None:
                out[f"w_{name}"] = st.w.copy()
        return out

    def deviance_terms(self):
        """Bernoulli deviance over non-tied cells and the probabilities."""
        dev = 0.0
        probs = {}
        for name, blk in self.blocks.items():
            eta = linear_predictor(self.spec, blk, self.state.blocks[name])
            y = blk.ind
            keep = ~blk.tied
            ll = np.where(y > 0.5, log_expit(eta), log_expit(-eta))
            dev += -2.0 * float(np.sum(ll[keep]))
            probs[name] = np.exp(log_expit(eta))
        return dev, probs


# ---------------------------------------------------------------------------
# posterior container


@dataclass
class PosteriorDraws:
    """Thinned draws of every chain plus what prediction needs.

    ``scalars[name]`` has shape ``(n_chains, n_draws)``; ``fields[name]``
    has shape ``(n_chains, n_draws, ...)``: ``W_<block>`` are the spatial
    effects (``(T-1, D, n)`` daily or ``(n,)`` static) and ``w_<block>``
    the temporal intercepts.
    """

    model: str
    scalars: dict[str, np.ndarray]
    fields: dict[str, np.ndarray]
    sites: tuple[str, ...]
    coords: np.ndarray
    dist_coast: np.ndarray
    T: int
    main_days: np.ndarray
    initial_days: bool
    scaling: dict[str, ScalingSpec]
    columns: dict[str, tuple[str, ...]]
    chain_meta: list[dict] = field(default_factory=list)
    dic: dict[str, float] | None = None
    fitted: dict[str, np.ndarray] | None = None
    latent: dict[str, np.ndarray] | None = None

    @property
    def param_names(self) -> list[str]:
        return list(self.scalars)

    @property
    def n_chains(self) -> int:
        if self.scalars:
            return next(iter(self.scalars.values())).shape[0]
        return len(self.chain_meta) or 1

    @property
    def n_draws(self) -> int:
        if self.scalars:
            return next(iter(self.scalars.values())).shape[1]
        return 1

    @property
    def spatial(self) -> str | None:
        return VARIANTS[self.model][0]

    @property
    def temporal(self) -> str | None:
        return VARIANTS[self.model][1]

    @property
    def blocks(self) -> tuple[str, ...]:
        return ("main", "day1", "day2") if self.initial_days else ("main",)

    def block_days(self, block: str) -> np.ndarray:
        return {"main": self.main_days, "day1": np.array([1]), "day2": np.array([2])}[block]

    def beta(self, block: str = "main") -> np.ndarray:
        """Stacked coefficients, shape ``(n_chains * n_draws, p)``."""
        sfx = "" if block == "main" else f"_{block}"
        names = [f"beta{sfx}[{c}]" for c in self.columns[block]]
        return np.stack([self.scalars[k].reshape(-1) for k in names], axis=-1)

    def flat(self, name: str) -> np.ndarray:
        """Scalar or field draws with chains concatenated."""
        a = self.scalars[name] if name in self.scalars else self.fields[name]
        return a.reshape(-1, *a.shape[2:])

    def scalar(self, name: str, block: str) -> np.ndarray:
        sfx = "" if block == "main" else f"_{block}"
        return self.scalars[f"{name}{sfx}"].reshape(-1)

    def raw_beta(self, block: str = "main") -> np.ndarray:
        """Coefficients on the unscaled covariates (M1 only has an intercept)."""
        spec = self.scaling[block]
        full_cols = DESIGN_COLUMNS if block == "main" else INITIAL_COLUMNS
        b = np.zeros((self.n_chains * self.n_draws, len(full_cols)))
        idx = [full_cols.index(c) for c in self.columns[block]]
        b[:, idx] = self.beta(block)
        raw = spec.unscale_coefficients(b)
        if self.model != "M1":
            raw = raw[:, 1:]
        return raw

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for k, v in self.scalars.items():
            x = v.reshape(-1)
            out[k] = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
                      "q05": float(np.quantile(x, 0.05)), "q95": float(np.quantile(x, 0.95))}
        return out


def fixed_coefficient_draws(beta: dict[str, np.ndarray], sites, coords, dist_coast,
                            T: int, n_draws: int = 1) -> PosteriorDraws:
    """A single-draw M1 posterior with known raw coefficients.

    ``beta`` maps ``"main"`` to the 21 design coefficients and, optionally,
    ``"day1"`` and ``"day2"`` to the 3 initial-day coefficients.  Scaling
    is the identity, so the draws simulate data with exactly these
    coefficients through :func:`~recordbreak.predict.simulate_predictive`.
    ``n_draws`` repeats the coefficients so one rollout yields that many
    independent data sets.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    cols = {"main": DESIGN_COLUMNS, "day1": INITIAL_COLUMNS, "day2": INITIAL_COLUMNS}
    blocks = [b for b in BLOCKS if b in beta]
    if "main" not in blocks or len(blocks) == 2:
        raise ValueError("need main coefficients plus both or neither initial-day blocks")
    scalars = {}
    for b in blocks:
        v = np.asarray(beta[b], dtype=float)
        if v.shape != (len(cols[b]),):
            raise ValueError(f"{b} coefficients must have length {len(cols[b])}")
        sfx = "" if b == "main" else f"_{b}"
        for c, x in zip(cols[b], v):
            scalars[f"beta{sfx}[{c}]"] = np.full((1, n_draws), x)
    return PosteriorDraws(
        "M1", scalars, {}, sites=tuple(sites), coords=np.asarray(coords, dtype=float),
        dist_coast=np.asarray(dist_coast, dtype=float), T=int(T),
        main_days=np.arange(3, N_DAYS + 1), initial_days=len(blocks) == 3,
        scaling={b: ScalingSpec.identity(len(cols[b])) for b in blocks},
        columns={b: cols[b] for b in blocks}, chain_meta=[{"fixed": True}])


# ---------------------------------------------------------------------------
# drivers


def _run_single(spec: ModelSpec, tensor: RecordTensor, seed_seq: np.random.SeedSequence,
                overrides: dict | None):
    rng = np.random.default_rng(seed_seq)
    blocks = build_blocks(tensor, spec)
    sampler = GibbsSampler(spec, blocks, tensor, rng, overrides)
    scalars: dict[str, list] = {}
    fields: dict[str, list] = {}
    latent: dict[str, list] = {}
    devs = []
    psum = {k: np.zeros(b.shape) for k, b in blocks.items()}
    t0 = time.perf_counter()
    for it in range(spec.n_iter):
        sampler.sweep()
        if it == spec.burn_in - 1:
            sampler.state.phi.freeze()
            sampler.state.lam_accept = sampler.state.lam_total = 0
        if it >= spec.burn_in and (it - spec.burn_in) % spec.thin == 0:
            for k, v in sampler.scalar_values().items():
                scalars.setdefault(k, []).append(v)
            if spec.keep_fields:
                for k, v in sampler.field_values().items():
                    fields.setdefault(k, []).append(v)
            if spec.keep_latent:
                for k, st in sampler.state.blocks.items():
                    latent.setdefault(f"Y_{k}", []).append(st.Y.copy())
                    latent.setdefault(f"lam_{k}", []).append(st.lam.copy())
                    latent.setdefault(f"eta_{k}", []).append(
                        linear_predictor(spec, blocks[k], st))
            dev, probs = sampler.deviance_terms()
            devs.append(dev)
            for k in psum:
                psum[k] += probs[k]
    st = sampler.state
    meta = {
        "seed_entropy": str(seed_seq.entropy), "spawn_key": list(seed_seq.spawn_key),
        "lambda_acceptance": st.lam_accept / st.lam_total if st.lam_total else None,
        "phi_acceptance": st.phi.acceptance_rate if spec.spatial else None,
        "phi_proposal_sd": st.phi.proposal_sd if spec.spatial else None,
        "seconds": time.perf_counter() - t0,
    }
    return {"scalars": scalars, "fields": fields, "latent": latent, "devs": np.array(devs),
            "psum": psum, "meta": meta, "blocks": blocks}


def _deviance(p: np.ndarray, y: np.ndarray, keep: np.ndarray) -> float:
    pk, yk = p[keep], y[keep]
    with np.errstate(divide="ignore"):
        ll = np.where(yk > 0.5, np.log(pk), np.log1p(-pk))
    return -2.0 * float(np.sum(ll))


def m0_probabilities(T: int, days, n: int) -> np.ndarray:
    """``p = 1/t`` on the ``(T-1, D, n)`` grid of years ``t = 2..T``."""
    t = np.arange(2, T + 1, dtype=float)
    return np.broadcast_to((1.0 / t)[:, None, None], (T - 1, len(days), n)).copy()


def _common(spec: ModelSpec, tensor: RecordTensor, blocks: dict[str, Block]) -> dict:
    return dict(sites=tuple(tensor.sites), coords=np.asarray(tensor.coords, dtype=float),
                dist_coast=np.asarray(tensor.dist_coast, dtype=float), T=tensor.shape[1],
                main_days=spec.main_days, initial_days=spec.initial_days,
                scaling={k: b.scaling for k, b in blocks.items()},
                columns={k: b.columns for k, b in blocks.items()})


def _fit_m0(spec: ModelSpec, tensor: RecordTensor) -> PosteriorDraws:
    # closed form: no design, so no scaling constraints on the data
    n, T, _ = tensor.shape
    V = tensor.values("exclude")
    layout = {"main": (spec.main_days, DESIGN_COLUMNS)}
    if spec.initial_days:
        layout.update(day1=(np.array([1]), INITIAL_COLUMNS), day2=(np.array([2]), INITIAL_COLUMNS))
    fitted, d = {}, 0.0
    for k, (days, _) in layout.items():
        sel = (slice(None), slice(1, None), days - 1)
        y = np.transpose(V[sel], (1, 2, 0))
        keep = np.transpose(tensor.tie_r[sel], (1, 2, 0)) < 2
        fitted[k] = m0_probabilities(T, days, n)
        d += _deviance(fitted[k], y, keep)
    # one deterministic draw: D-bar and D(p-bar) are the same number
    dic = {"d_hat": d, "d_pbar": d, "p_d": d - d, "dic": d + (d - d)}
    return PosteriorDraws(
        "M0", {}, {}, sites=tuple(tensor.sites), coords=np.asarray(tensor.coords, dtype=float),
        dist_coast=np.asarray(tensor.dist_coast, dtype=float), T=T, main_days=spec.main_days,
        initial_days=spec.initial_days,
        scaling={k: ScalingSpec.identity(len(c)) for k, (_, c) in layout.items()},
        columns={k: () for k in layout}, chain_meta=[{"closed_form": True}], dic=dic,
        fitted=fitted)


def run_chain(spec: ModelSpec, tensor: RecordTensor, threads: int | None = None,
              inits: list[dict] | None = None) -> PosteriorDraws:
    """Run ``spec.n_chains`` chains and collect thinned draws.

    Chains use independent streams spawned from ``spec.seed`` and may run
    in parallel threads; the result does not depend on ``threads``.

    Parameters
    ----------
    spec : ModelSpec
    tensor : RecordTensor
        Must carry ``coords`` and ``dist_coast``.
    threads : int, optional
        Worker threads for the chains (default: one per chain).
    inits : list of dict, optional
        Per-chain starting-value overrides, see :func:`init_state`.
    """
    if tensor.coords is None or tensor.dist_coast is None:
        raise ValueError("tensor must carry coords and dist_coast")
    if spec.variant == "M0":
        return _fit_m0(spec, tensor)
    if inits is not None and len(inits) != spec.n_chains:
        raise ValueError("need one init override per chain")
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_chains)
    inits = inits or [None] * spec.n_chains
    workers = max(1, min(threads or spec.n_chains, spec.n_chains))
    if workers == 1:
        results = [_run_single(spec, tensor, s, o) for s, o in zip(seeds, inits)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _run_single(spec, tensor, *a), zip(seeds, inits)))
    scalars = {k: np.array([r["scalars"][k] for r in results]) for k in results[0]["scalars"]}
    fields = {k: np.array([r["fields"][k] for r in results]) for k in results[0]["fields"]}
    latent = ({k: np.array([r["latent"][k] for r in results]) for k in results[0]["latent"]}
              if spec.keep_latent else None)
    blocks = results[0]["blocks"]
    n_total = spec.n_kept * spec.n_chains
    fitted = {k: sum(r["psum"][k] for r in results) / n_total for k in blocks}
    d_hat = float(np.mean(np.concatenate([r["devs"] for r in results])))
    # non-tied outcomes never change during sampling
    d_pbar = sum(_deviance(fitted[k], b.ind, ~b.tied) for k, b in blocks.items())
    p_d = d_hat - d_pbar
    dic = {"d_hat": d_hat, "d_pbar": d_pbar, "p_d": p_d, "dic": d_hat + p_d}
    return PosteriorDraws(spec.variant, scalars, fields, chain_meta=[r["meta"] for r in results],
                          dic=dic, fitted=fitted, latent=latent, **_common(spec, tensor, blocks))

