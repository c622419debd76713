"""Estimator-style front end for the Gibbs model plus input validation helpers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .mcmc import ModelSpec, PosteriorDraws, run_chain
from .predict import PredictionGrid, PredictiveField, one_step_ahead, simulate_predictive
from .records import RecordTensor, TemperaturePanel, extract_records


def check_tensor(data, require_geo: bool = True) -> RecordTensor:
    """Return a :class:`RecordTensor` from a tensor or a temperature panel."""
    if isinstance(data, TemperaturePanel):
        data = extract_records(data)
    if not isinstance(data, RecordTensor):
        raise TypeError(f"expected RecordTensor or TemperaturePanel, got {type(data).__name__}")
    if require_geo:
        if data.coords is None or data.dist_coast is None:
            raise ValueError("records must carry site coordinates and coast distances")
        coords = np.asarray(data.coords, dtype=float)
        dist = np.asarray(data.dist_coast, dtype=float)
        n = data.shape[0]
        if coords.shape != (n, 2) or dist.shape != (n,):
            raise ValueError("coords must be (n_sites, 2) and dist_coast (n_sites,)")
        if not np.all(np.isfinite(coords)) or not np.all(dist > 0):
            raise ValueError("coords must be finite and dist_coast positive")
    if data.shape[1] < 4:
        raise ValueError("need at least 4 years of records")
    return data


def check_grid(grid) -> PredictionGrid:
    if not isinstance(grid, PredictionGrid):
        raise TypeError(f"expected PredictionGrid, got {type(grid).__name__}")
    return grid


class SpatialRecordModel(BaseEstimator):
    """Bayesian logistic model for daily record indicators.

    Parameters mirror :class:`~recordbreak.mcmc.ModelSpec`; ``threads``
    bounds chain parallelism and does not change the draws.

    Attributes
    ----------
    draws_ : PosteriorDraws
    dic_ : dict
        ``dic``, ``d_hat`` and ``p_d``.
    """

    def __init__(self, variant: str = "M5", n_iter: int = 2000, burn_in: int = 1000,
                 thin: int = 1, n_chains: int = 2, seed: int = 0, days=None,
                 initial_days: bool = True, sd_beta: float = 100.0, a_sigma: float = 2.0,
                 b_sigma: float = 1.0, a_phi: float = 2.0, b_phi: float = 1.0,
                 keep_fields: bool = True, threads: int | None = None):
        self.variant = variant
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.n_chains = n_chains
        self.seed = seed
        self.days = days
        self.initial_days = initial_days
        self.sd_beta = sd_beta
        self.a_sigma = a_sigma
        self.b_sigma = b_sigma
        self.a_phi = a_phi
        self.b_phi = b_phi
        self.keep_fields = keep_fields
        self.threads = threads

    def model_spec(self) -> ModelSpec:
        p = self.get_params()
        p.pop("threads")
        return ModelSpec(**p)

    def fit(self, X, y=None):
        """Sample the posterior for records ``X`` (tensor or panel)."""
        tensor = check_tensor(X)
        self.draws_: PosteriorDraws = run_chain(self.model_spec(), tensor, threads=self.threads)
        self.dic_ = self.draws_.dic
        self.n_sites_in_ = tensor.shape[0]
        return self

    def predict_proba(self, X, n_draws: int | None = 200) -> np.ndarray:
        """Posterior-mean one-step-ahead probabilities at the sites of ``X``.

        Returns ``(T - 1, 365, n_sites)``; unmodelled days are ``nan``.
        """
        check_is_fitted(self, "draws_")
        tensor = check_tensor(X)
        rng = np.random.default_rng([self.seed, 1])
        return one_step_ahead(self.draws_, tensor, rng, n_draws=n_draws, reduce="mean")

    def simulate(self, grid, n_draws: int | None = 100, t_max: int | None = None,
                 seed: int | None = None) -> PredictiveField:
        """Posterior-predictive record indicators on ``grid``."""
        check_is_fitted(self, "draws_")
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return simulate_predictive(self.draws_, check_grid(grid), rng, t_max=t_max,
                                   n_draws=n_draws)
