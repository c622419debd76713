"""Scoring rules, DIC, PIT histograms, PSRF and spatial cross-validation."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .mcmc import ModelSpec, PosteriorDraws, run_chain
from .predict import one_step_ahead
from .records import RecordTensor

PIT_BINS = 10
DEFAULT_PERIODS = ((2, 31), (32, 62))


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for its input (e.g. one class)."""


def _pair(p, y, exclude=None):
    p = np.asarray(p, dtype=float).ravel()
    y = np.asarray(y).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} scores vs {y.size} outcomes")
    keep = ~np.isnan(p)
    if exclude is not None:
        ex = np.asarray(exclude, dtype=bool).ravel()
        if ex.shape != y.shape:
            raise ValueError("exclusion mask must align with outcomes")
        keep &= ~ex
    p, y = p[keep], y[keep]
    if p.size == 0:
        raise ValueError("no observations to score")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("outcomes must be 0/1")
    return p, y.astype(float)


def brier(probabilities, outcomes, exclude=None) -> float:
    """Mean squared difference between outcome and probability.

    ``exclude`` flags observations left out of the score (tied records);
    ``nan`` probabilities (days outside the model) are skipped too.
    """
    p, y = _pair(probabilities, outcomes, exclude)
    return float(np.mean((y - p) ** 2))


def auc(scores, outcomes, exclude=None) -> float:
    """Mann-Whitney area under the ROC curve, ties counted one half."""
    s, y = _pair(scores, outcomes, exclude)
    pos = y == 1
    n1 = int(pos.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative outcome")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def bernoulli_deviance(p, y) -> float:
    """``-2 sum log p(y)``; discordant certain probabilities raise."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y)
    if p.shape[-1:] != y.shape[-1:]:
        raise ValueError("probabilities and outcomes must align")
    if np.any((p == 0) & (y == 1)) or np.any((p == 1) & (y == 0)):
        raise ValueError("infinite deviance: probability 0 or 1 with a discordant outcome")
    with np.errstate(divide="ignore"):
        ll = np.where(y == 1, np.log(p), np.log1p(-p))
    ll = np.where(((p == 0) & (y == 0)) | ((p == 1) & (y == 1)), 0.0, ll)
    return -2.0 * np.sum(ll, axis=-1)


def dic(prob_draws, outcomes) -> dict[str, float]:
    """DIC from per-draw probabilities ``(n_draws, n_obs)``.

    ``d_hat`` is the mean deviance, ``p_d = d_hat - D(p_bar)``.
    """
    P = np.atleast_2d(np.asarray(prob_draws, dtype=float))
    y = np.asarray(outcomes).ravel()
    if P.shape[1] != y.size:
        raise ValueError("probabilities and outcomes must align")
    d_draw = bernoulli_deviance(P, y[None, :])
    d_hat = float(np.mean(d_draw))
    d_bar = float(bernoulli_deviance(P.mean(axis=0), y))
    p_d = d_hat - d_bar
    return {"dic": d_hat + p_d, "d_hat": d_hat, "p_d": p_d}


# ---------------------------------------------------------------------------
# PIT


class PITAccumulator:
    """Discrete-data PIT histogram over ``n_bins`` equal bins of ``[0, 1]``.

    Each observation contributes the piecewise-linear cdf that is 0 below
    ``P_{k-1}``, 1 above ``P_k`` and linear in between.
    """

    def __init__(self, n_bins: int = PIT_BINS):
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        self.n_bins = n_bins
        self.grid = np.linspace(0.0, 1.0, n_bins + 1)
        self._F = np.zeros(n_bins + 1)
        self.n = 0

    def add(self, p_lower, p_upper) -> "PITAccumulator":
        lo = np.atleast_1d(np.asarray(p_lower, dtype=float))
        hi = np.atleast_1d(np.asarray(p_upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("P_{k-1} and P_k must align")
        if np.any(lo > hi):
            raise ValueError("need P_{k-1} <= P_k for every observation")
        if np.any(lo < 0) or np.any(hi > 1):
            raise ValueError("cdf values must lie in [0, 1]")
        u = self.grid[None, :]
        width = (hi - lo)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            F = np.where(width > 0, (u - lo[:, None]) / width, 1.0)
        F = np.where(u <= lo[:, None], 0.0, np.where(u >= hi[:, None], 1.0, F))
        F[:, -1] = 1.0  # a point mass at 1 stays in the last bin
        self._F += F.sum(axis=0)
        self.n += lo.size
        return self

    @property
    def masses(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no observations accumulated")
        return np.diff(self._F / self.n)


def pit_histogram(p_lower, p_upper, n_bins: int = PIT_BINS) -> np.ndarray:
    """Bin masses ``f_1..f_J`` of the mean PIT cdf."""
    return PITAccumulator(n_bins).add(p_lower, p_upper).masses


def pit_bounds(samples, observed) -> tuple[np.ndarray, np.ndarray]:
    """``(P(X < x), P(X <= x))`` from predictive samples ``(n_draws, n_obs)``."""
    S = np.asarray(samples, dtype=float)
    x = np.asarray(observed, dtype=float).ravel()
    if S.ndim != 2 or S.shape[1] != x.size:
        raise ValueError("samples must be (n_draws, n_obs) aligned with observations")
    return np.mean(S < x, axis=0), np.mean(S <= x, axis=0)


# ---------------------------------------------------------------------------
# AD and PSRF


def ad_metric(observed_n, predicted_n) -> np.ndarray:
    """Per-year mean ``|N_obs - N_pred|`` over days, sites and draws.

    ``observed_n`` is ``(T, D, n)`` and ``predicted_n`` ``(n_draws, T, D, n)``.
    """
    obs = np.asarray(observed_n, dtype=float)
    pred = np.asarray(predicted_n, dtype=float)
    if pred.ndim != obs.ndim + 1 or pred.shape[1:] != obs.shape:
        raise ValueError("predicted counts must be (n_draws,) + observed shape")
    axes = (0,) + tuple(range(2, pred.ndim))
    return np.abs(pred - obs[None]).mean(axis=axes)


def _split(chains: np.ndarray) -> np.ndarray:
    m, n = chains.shape[:2]
    h = n // 2
    return np.concatenate([chains[:, :h], chains[:, n - h:]], axis=0)


def psrf(chains, split: bool = True) -> float:
    """Marginal potential scale reduction factor.

    ``chains`` has shape ``(n_chains, n_draws)``; chains are split in half
    before comparison by default.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("psrf needs at least two chains")
    if x.shape[1] < 10:
        raise ValueError("psrf needs chains of length >= 10")
    if split:
        x = _split(x)
    n = x.shape[1]
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if not W > 0:
        raise UndefinedMetricError("degenerate within-chain variance")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def multivariate_psrf(chains) -> float:
    """Multivariate PSRF from ``(n_chains, n_draws, p)`` draws.

    ``(n - 1)/n + (m + 1)/m * lambda_max(W^{-1} B/n)``.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 3 or x.shape[0] < 2:
        raise ValueError("multivariate psrf needs (n_chains >= 2, n_draws, p)")
    m, n, p = x.shape
    if n < 10:
        raise ValueError("psrf needs chains of length >= 10")
    centred = x - x.mean(axis=1, keepdims=True)
    W = np.einsum("mni,mnj->ij", centred, centred) / (m * (n - 1))
    means = x.mean(axis=1)
    Bn = np.cov(means, rowvar=False, ddof=1).reshape(p, p)
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise UndefinedMetricError("within-chain covariance is singular") from exc
    Li = np.linalg.inv(L)
    lam = np.linalg.eigvalsh(Li @ Bn @ Li.T).max()
    return float((n - 1) / n + (m + 1) / m * lam)


def psrf_table(draws: PosteriorDraws, names: Sequence[str] | None = None) -> dict[str, float]:
    """Marginal PSRF per retained scalar plus ``"multivariate"``.

    Parameters without within-chain variation get ``nan``.
    """
    if draws.n_chains < 2:
        raise ValueError("psrf needs at least two chains")
    names = list(draws.scalars) if names is None else list(names)
    out = {}
    for k in names:
        try:
            out[k] = psrf(draws.scalars[k])
        except UndefinedMetricError:
            out[k] = float("nan")
    usable = [k for k in names if np.isfinite(out[k])]
    if usable:
        stack = np.stack([draws.scalars[k] for k in usable], axis=-1)
        try:
            out["multivariate"] = multivariate_psrf(stack)
        except (UndefinedMetricError, ValueError):
            out["multivariate"] = float("nan")
    return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CVPlan:
    """Disjoint hold-out groups covering every site."""

    groups: tuple[tuple[str, ...], ...]
    seed: int | None = None

    def __post_init__(self):
        groups = tuple(tuple(str(s) for s in g) for g in self.groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise ValueError("plan needs non-empty groups")
        flat = [s for g in groups for s in g]
        if len(set(flat)) != len(flat):
            raise ValueError("plan groups must be disjoint")
        sizes = [len(g) for g in groups]
        if max(sizes) - min(sizes) > 1:
            raise ValueError("group sizes may differ by at most one")
        object.__setattr__(self, "groups", groups)

    @property
    def sites(self) -> tuple[str, ...]:
        return tuple(s for g in self.groups for s in g)

    def check_covers(self, sites: Sequence[str]) -> None:
        if set(self.sites) != set(map(str, sites)):
            raise ValueError("plan groups must cover exactly the panel sites")

    @classmethod
    def random(cls, sites: Sequence[str], n_groups: int = 10, seed: int = 0) -> "CVPlan":
        sites = [str(s) for s in sites]
        if not 1 <= n_groups <= len(sites):
            raise ValueError("need 1 <= n_groups <= number of sites")
        perm = np.random.default_rng(seed).permutation(len(sites))
        groups = [tuple(sites[i] for i in part) for part in np.array_split(perm, n_groups)]
        return cls(tuple(groups), seed)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"seed": self.seed, "groups": self.groups}, indent=1))

    @classmethod
    def from_json(cls, path) -> "CVPlan":
        raw = json.loads(Path(path).read_text())
        return cls(tuple(tuple(g) for g in raw["groups"]), raw.get("seed"))


@dataclass
class CVResult:
    """Per-fold rows and the summary table."""

    rows: list[dict]
    summary: list[dict]


def _fold(spec: ModelSpec, tensor: RecordTensor, group, seed_seq, periods, n_draws):
    train = [s for s in tensor.sites if s not in set(group)]
    draws = run_chain(spec, tensor.subset(train), threads=1)
    hold = tensor.subset(list(group))
    p = one_step_ahead(draws, hold, np.random.default_rng(seed_seq), n_draws=n_draws,
                       reduce="mean")
    y = hold.indicator[:, 1:].transpose(1, 2, 0)
    tied = hold.tied[:, 1:].transpose(1, 2, 0)
    out = {}
    for lo, hi in periods:
        sl = slice(lo - 2, hi - 1)
        out[(lo, hi)] = (p[sl], y[sl], tied[sl])
    return out


def run_crossval(specs: Mapping[str, ModelSpec], tensor: RecordTensor, plan: CVPlan,
                 periods=DEFAULT_PERIODS, threads: int | None = None,
                 n_draws: int | None = 200, pooled_auc: bool = False) -> CVResult:
    """Leave-one-group-out one-step-ahead scoring of several models.

    Parameters
    ----------
    specs : mapping
        Model label to :class:`ModelSpec`.
    tensor : RecordTensor
        All sites, with coordinates and coast distances.
    plan : CVPlan
    periods : sequence of (first, last) years
        Score windows; years outside ``2..T`` are clipped.
    threads : int, optional
        Folds run concurrently in this many threads.
    n_draws : int, optional
        Posterior draws used for the predictive mean.
    pooled_auc : bool
        Pool hold-out observations instead of averaging fold AUCs.

    Returns
    -------
    CVResult
        ``rows`` with keys ``model, fold, period, bs, auc, n, error`` and a
        ``summary`` per ``(model, period)``.  Brier scores pool every
        scored observation; AUC averages folds unless ``pooled_auc``.
    """
    plan.check_covers(tensor.sites)
    T = tensor.shape[1]
    periods = [(max(2, lo), min(T, hi)) for lo, hi in periods]
    periods = [pr for pr in periods if pr[0] <= pr[1]]
    if not periods:
        raise ValueError("no scoring period inside years 2..T")
    rows, summary = [], []
    for model, spec in specs.items():
        seeds = np.random.SeedSequence([spec.seed, 7919]).spawn(len(plan.groups))
        jobs = list(enumerate(plan.groups))

        def work(job):
            k, group = job
            try:
                return _fold(spec, tensor, group, seeds[k], periods, n_draws), None
            except Exception as exc:  # reported per fold, the others go on
                return None, f"{type(exc).__name__}: {exc}"

        with ThreadPoolExecutor(max_workers=threads or 1) as pool:
            results = list(pool.map(work, jobs))
        for lo, hi in periods:
            sq_sum, count, aucs, pool_p, pool_y = 0.0, 0, [], [], []
            for k, (res, err) in enumerate(results):
                row = {"model": model, "fold": k, "period": f"{lo}-{hi}", "bs": float("nan"),
                       "auc": float("nan"), "n": 0, "error": err or ""}
                if res is not None:
                    p, y, tied = res[(lo, hi)]
                    keep = ~tied & ~np.isnan(p)
                    pk, yk = p[keep], y[keep].astype(float)
                    row["n"] = int(pk.size)
                    if pk.size:
                        row["bs"] = brier(pk, yk)
                        sq_sum += float(np.sum((yk - pk) ** 2))
                        count += pk.size
                        pool_p.append(pk)
                        pool_y.append(yk)
                        try:
                            row["auc"] = auc(pk, yk)
                            aucs.append(row["auc"])
                        except UndefinedMetricError:
                            warnings.warn(f"{model} fold {k}: AUC undefined, fold skipped",
                                          RuntimeWarning, stacklevel=2)
                rows.append(row)
            if pooled_auc and pool_p:
                try:
                    a = auc(np.concatenate(pool_p), np.concatenate(pool_y))
                except UndefinedMetricError:
                    a = float("nan")
            else:
                a = float(np.mean(aucs)) if aucs else float("nan")
            summary.append({"model": model, "period": f"{lo}-{hi}",
                            "bs": sq_sum / count if count else float("nan"), "auc": a,
                            "n_folds": sum(r is not None for r, _ in results)})
    return CVResult(rows, summary)
