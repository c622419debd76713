"""Spatial Bayesian modelling of daily temperature record occurrence."""

from .estimator import SpatialRecordModel, check_grid, check_tensor
from .mcmc import ModelSpec, PosteriorDraws, run_chain
from .predict import PredictionGrid, PredictiveField, one_step_ahead, simulate_predictive
from .records import (RecordTensor, SimulatedSeriesConfig, TemperaturePanel, extract_records,
                      simulate_series)

__version__ = "0.1.0"

__all__ = [
    "ModelSpec", "PosteriorDraws", "PredictionGrid", "PredictiveField", "RecordTensor",
    "SimulatedSeriesConfig", "SpatialRecordModel", "TemperaturePanel", "check_grid",
    "check_tensor", "extract_records", "one_step_ahead", "run_chain", "simulate_predictive",
    "simulate_series",
]
