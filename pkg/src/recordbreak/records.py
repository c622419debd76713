"""Record indicators for daily temperature series.

Temperatures are organised as a ``(site, year, day)`` cube with a fixed
365-day year.  Each ``(site, day)`` pair is one yearly series on which
records are identified.  Missing values use ``-inf`` so they never beat the
running maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

N_DAYS = 365
MISSING = -np.inf

TieRule = Literal["exclude", "weak"]


class MalformedInputError(ValueError):
    """Raised when a temperature panel violates its structural contract."""


@dataclass(frozen=True)
class TemperaturePanel:
    """Daily maxima on a shared ``(year, day)`` grid.

    Parameters
    ----------
    sites : sequence of str
        Site identifiers, one per row of ``temps``.
    coords : ndarray, shape (n_sites, 2)
        Planar projected coordinates in km.
    dist_coast : ndarray, shape (n_sites,)
        Distance to the coast in km, strictly positive.
    temps : ndarray, shape (n_sites, T, 365)
        Temperatures; missing values are ``-inf``.
    years : ndarray of int, optional
        Calendar labels for ``t = 1..T``.  Defaults to ``1..T``.
    """

    sites: Sequence[str]
    coords: np.ndarray
    dist_coast: np.ndarray
    temps: np.ndarray
    years: np.ndarray | None = field(default=None)

    def __post_init__(self):
        temps = np.asarray(self.temps, dtype=float)
        coords = np.asarray(self.coords, dtype=float)
        dist = np.asarray(self.dist_coast, dtype=float)
        sites = tuple(str(s) for s in self.sites)
        if temps.ndim != 3 or temps.shape[2] != N_DAYS:
            raise MalformedInputError(
                f"temps must have shape (n_sites, T, {N_DAYS}), got {temps.shape}")
        n, T, _ = temps.shape
        if T < 2:
            raise MalformedInputError(f"need at least 2 years, got T={T}")
        if len(sites) != n or len(set(sites)) != n:
            raise MalformedInputError("site ids must be unique and match temps rows")
        if coords.shape != (n, 2):
            raise MalformedInputError(f"coords must have shape ({n}, 2)")
        if dist.shape != (n,) or not np.all(dist > 0):
            raise MalformedInputError("dist_coast must be positive, one per site")
        bad = ~np.isfinite(temps) & ~(temps == MISSING)
        if bad.any():
            idx = tuple(int(i[0]) for i in np.nonzero(bad))
            raise MalformedInputError(f"non-finite temperature at (site, t, day) index {idx}")
        years = np.arange(1, T + 1) if self.years is None else np.asarray(self.years, dtype=int)
        if years.shape != (T,):
            raise MalformedInputError("years must have one label per t")
        object.__setattr__(self, "temps", temps)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "dist_coast", dist)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "years", years)

    @property
    def n_sites(self) -> int:
        return self.temps.shape[0]

    @property
    def n_years(self) -> int:
        return self.temps.shape[1]

    def subset(self, sites) -> "TemperaturePanel":
        """Panel restricted to the given site ids or integer positions."""
        idx = _site_positions(self.sites, sites)
        return TemperaturePanel(
            sites=[self.sites[i] for i in idx], coords=self.coords[idx],
            dist_coast=self.dist_coast[idx], temps=self.temps[idx], years=self.years)


@dataclass(frozen=True)
class RecordTensor:
    """Record indicators with tie multiplicities.

    ``indicator`` holds 1 for strict records (and the trivial record at
    ``t = 1``) and 0 otherwise; a cell with ``tie_r >= 2`` is an r-tied
    record whose indicator is unknown and stored as 0.
    """

    indicator: np.ndarray
    tie_r: np.ndarray
    sites: Sequence[str] = ()
    coords: np.ndarray | None = None
    dist_coast: np.ndarray | None = None

    def __post_init__(self):
        ind = np.asarray(self.indicator, dtype=np.int8)
        tie = np.asarray(self.tie_r, dtype=np.int16)
        if ind.ndim != 3 or ind.shape[2] != N_DAYS or tie.shape != ind.shape:
            raise MalformedInputError("indicator/tie_r must share shape (n_sites, T, 365)")
        if np.any((tie == 1) | (tie < 0)) or np.any(ind[tie > 0] != 0):
            raise MalformedInputError("tie multiplicities must be 0 or >= 2 on zero indicators")
        object.__setattr__(self, "indicator", ind)
        object.__setattr__(self, "tie_r", tie)
        if not self.sites:
            object.__setattr__(self, "sites", tuple(str(i) for i in range(ind.shape[0])))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.indicator.shape

    @property
    def tied(self) -> np.ndarray:
        return self.tie_r >= 2

    def values(self, tie_rule: TieRule = "exclude") -> np.ndarray:
        """0/1 indicators with ties mapped to 0 (``exclude``) or 1 (``weak``)."""
        if tie_rule == "exclude":
            return self.indicator.copy()
        if tie_rule == "weak":
            return np.where(self.tied, 1, self.indicator).astype(np.int8)
        raise ValueError(f"unknown tie rule {tie_rule!r}")

    def subset(self, sites) -> "RecordTensor":
        idx = _site_positions(self.sites, sites)
        return RecordTensor(
            self.indicator[idx], self.tie_r[idx], sites=[self.sites[i] for i in idx],
            coords=None if self.coords is None else self.coords[idx],
            dist_coast=None if self.dist_coast is None else self.dist_coast[idx])


def _site_positions(all_sites, sites) -> np.ndarray:
    lookup = {s: i for i, s in enumerate(all_sites)}
    out = []
    for s in sites:
        if isinstance(s, (int, np.integer)):
            out.append(int(s))
        elif s in lookup:
            out.append(lookup[s])
        else:
            raise KeyError(f"unknown site {s!r}")
    return np.asarray(out, dtype=int)


def lagged(values: np.ndarray, lag: int, fill: int = 0) -> np.ndarray:
    """Indicator ``lag`` days earlier, wrapping into the previous year.

    ``out[:, t, l] = values[:, t, l - lag]`` where day ``l - lag <= 0`` reads
    day ``365 + l - lag`` of year ``t - 1``.  Cells that would read before
    year 1 are set to ``fill``.
    """
    n, T, D = values.shape
    flat = values.reshape(n, T * D)
    out = np.full_like(flat, fill)
    out[:, lag:] = flat[:, :-lag]
    return out.reshape(n, T, D)


def _extract(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Records along axis 0 of ``y``; returns (indicator, tie_r)."""
    T = y.shape[0]
    ind = np.zeros(y.shape, dtype=np.int8)
    tie = np.zeros(y.shape, dtype=np.int16)
    ind[0] = 1
    running = y[0].copy()
    # occurrences of the running max value so far
    count = np.ones(y.shape[1:], dtype=np.int16)
    for t in range(1, T):
        cur = y[t]
        new = cur > running
        eq = (cur == running) & np.isfinite(cur)
        ind[t] = new
        tie[t] = np.where(eq, count + 1, 0)
        count = np.where(new, 1, np.where(eq, count + 1, count))
        running = np.where(new, cur, running)
    return ind, tie


def extract_records(panel: TemperaturePanel) -> RecordTensor:
    """Record indicators and tie multiplicities for every ``(site, day)`` series.

    A value strictly above the running maximum is a record; a value equal to
    it is an r-tied record where r counts the earlier weak records sharing
    that value.  Missing values never count after the first year.
    """
    if not isinstance(panel, TemperaturePanel):
        raise TypeError("extract_records expects a TemperaturePanel")
    y = np.moveaxis(panel.temps, 1, 0)
    ind, tie = _extract(y)
    return RecordTensor(
        np.moveaxis(ind, 0, 1), np.moveaxis(tie, 0, 1), sites=panel.sites,
        coords=panel.coords, dist_coast=panel.dist_coast)


def extract_series(y) -> tuple[np.ndarray, np.ndarray]:
    """Record indicators for one or many series laid out along the last axis."""
    y = np.asarray(y, dtype=float)
    bad = ~np.isfinite(y) & ~(y == MISSING)
    if bad.any():
        raise MalformedInputError("series contains NaN or +inf")
    ind, tie = _extract(np.moveaxis(y, -1, 0))
    return np.moveaxis(ind, 0, -1), np.moveaxis(tie, 0, -1)


def count_records(tensor: RecordTensor, site: int, day: int, t: int,
                  tie_rule: TieRule = "exclude") -> int:
    """Number of records ``N_t`` up to year ``t`` (1-based) for one series.

    ``day`` is 1-based (1..365).
    """
    n, T, D = tensor.shape
    if not (0 <= site < n and 1 <= day <= D and 1 <= t <= T):
        raise IndexError(f"(site={site}, day={day}, t={t}) outside grid {tensor.shape}")
    series = tensor.values(tie_rule)[site, :t, day - 1]
    return int(series.sum())


def cumulative_counts(tensor: RecordTensor, tie_rule: TieRule = "exclude") -> np.ndarray:
    """``N_t`` for every cell, shape ``(n_sites, T, 365)``."""
    return np.cumsum(tensor.values(tie_rule), axis=1, dtype=np.int32)


def crm_probability(t) -> float | np.ndarray:
    """Record probability ``1/t`` of an i.i.d. continuous series."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1):
        raise ValueError("year index must be >= 1")
    out = 1.0 / t_arr.astype(float)
    return float(out) if out.ndim == 0 else out


def expected_stationary_records(t1: int, t2: int) -> float:
    """Expected records between years ``t1`` and ``t2`` under stationarity."""
    if t1 < 1 or t2 < t1:
        raise ValueError(f"need 1 <= t1 <= t2, got ({t1}, {t2})")
    return float(np.sum(1.0 / np.arange(t1, t2 + 1, dtype=float)))


@dataclass(frozen=True)
class SimulatedSeriesConfig:
    """Classical record model (``drift = 0``) or Gaussian linear drift model."""

    model: Literal["crm", "ldm"] = "crm"
    drift: float = 0.0
    sigma: float = 1.0
    T: int = 62
    replicates: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.model not in ("crm", "ldm"):
            raise ValueError(f"unknown model {self.model!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.T < 1 or self.replicates < 1:
            raise ValueError("T and replicates must be >= 1")


def simulate_series(cfg: SimulatedSeriesConfig, rng=None) -> TemperaturePanel:
    """Simulate ``Y_t = c t + e_t`` on ``cfg.replicates`` sites x 365 days.

    The classical record model ignores ``cfg.drift``.  Sites get arbitrary
    coordinates on a 100 km lattice with the coast along ``x = -5`` km.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    drift = 0.0 if cfg.model == "crm" else cfg.drift
    n, T = cfg.replicates, cfg.T
    eps = rng.normal(0.0, cfg.sigma, size=(n, T, N_DAYS))
    temps = eps + drift * np.arange(1, T + 1, dtype=float)[None, :, None]
    side = int(np.ceil(np.sqrt(n)))
    grid = np.stack(np.divmod(np.arange(n), side), axis=1) * 100.0
    if T < 2:
        raise ValueError("panels need T >= 2")
    return TemperaturePanel(
        sites=[f"S{i:04d}" for i in range(n)], coords=grid.astype(float),
        dist_coast=grid[:, 0] + 5.0, temps=temps)


@dataclass(frozen=True)
class MissingImpactSummary:
    mean_diff: float
    diff_q05: float
    diff_q95: float
    mean_delta: float
    delta_q05: float
    delta_q95: float
    diffs: np.ndarray
    deltas: np.ndarray


def missing_impact_study(cfg: SimulatedSeriesConfig, missing_mask: np.ndarray, reps: int,
                         rng=None, years: slice | None = None) -> MissingImpactSummary:
    """Effect of masking values to ``-inf`` on simulated record indicators.

    Each replicate simulates a panel shaped like ``missing_mask``, extracts
    records with and without the masked values and counts the indicators
    that change and the change in the total record count.  ``years``
    restricts both counts to a slice of the year axis.
    """
    mask = np.asarray(missing_mask, dtype=bool)
    if mask.ndim != 3 or mask.shape[2] != N_DAYS or mask.shape[1] != cfg.T:
        raise ValueError(f"mask must have shape (n_sites, {cfg.T}, {N_DAYS})")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    sim_cfg = SimulatedSeriesConfig(cfg.model, cfg.drift, cfg.sigma, cfg.T, mask.shape[0])
    window = slice(None) if years is None else years
    diffs = np.zeros(reps)
    deltas = np.zeros(reps)
    for k in range(reps):
        temps = simulate_series(sim_cfg, rng).temps
        base, _ = extract_series(np.moveaxis(temps, 1, -1))
        masked = np.where(mask, MISSING, temps)
        alt, _ = extract_series(np.moveaxis(masked, 1, -1))
        base, alt = base[..., window], alt[..., window]
        diffs[k] = np.count_nonzero(base != alt)
        deltas[k] = int(alt.sum(dtype=np.int64)) - int(base.sum(dtype=np.int64))
    return MissingImpactSummary(
        mean_diff=float(diffs.mean()), diff_q05=float(np.quantile(diffs, 0.05)),
        diff_q95=float(np.quantile(diffs, 0.95)), mean_delta=float(deltas.mean()),
        delta_q05=float(np.quantile(deltas, 0.05)), delta_q95=float(np.quantile(deltas, 0.95)),
        diffs=diffs, deltas=deltas)


def station_missing_mask(rng=None, n_sites: int = 40, T: int = 62, total: int = 649,
                         first_year: int = 52, decay_years: float = 40.0) -> np.ndarray:
    """A missing-value mask with the station profile of the Spanish network.

    Eight stations are complete, nineteen have one to ten gaps and one
    station has 70 gaps, 29 of them in year 6 and 18 in year 7.  The other
    gaps fall in year 1 with ``first_year`` expected cells and otherwise in
    years ``t >= 2`` with weight ``exp(-(t - 2) / decay_years)``; gaps were
    more common in the early decades.  Exactly ``total`` cells are masked.
    """
    rng = np.random.default_rng(rng)
    if n_sites != 40 or T < 8 or total < 165:
        raise ValueError("the station profile is defined for 40 sites and T >= 8")
    counts = np.zeros(n_sites, dtype=int)
    counts[8:27] = rng.integers(1, 11, size=19)
    counts[39] = 70
    rest = total - counts.sum()
    # remaining gaps shared by 12 stations with 11..69 each
    share = rng.multinomial(rest - 12 * 11, np.full(12, 1 / 12)) + 11
    while share.max() > 69:
        share[share.argmax()] -= 1
        share[share.argmin()] += 1
    counts[27:39] = share

    years = np.arange(2, T + 1)
    w = np.exp(-(years - 2) / decay_years)
    mask = np.zeros((n_sites, T, N_DAYS), dtype=bool)
    mask[39, 5, rng.choice(N_DAYS, 29, replace=False)] = True
    mask[39, 6, rng.choice(N_DAYS, 18, replace=False)] = True
    counts[39] -= 47
    owners = rng.permutation(np.repeat(np.arange(n_sites), counts))
    gap_years = np.concatenate([
        np.zeros(first_year, dtype=int),
        rng.choice(years - 1, size=owners.size - first_year, p=w / w.sum())])
    for i, t in zip(owners, gap_years):
        d = rng.integers(N_DAYS)
        while mask[i, t, d]:
            d = rng.integers(N_DAYS)
        mask[i, t, d] = True
    return mask
