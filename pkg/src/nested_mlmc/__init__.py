"""Nested multilevel Monte Carlo with preintegration for loss probabilities.

The estimated quantity is ``P(E[X | omega] > c)`` for the loss ``X`` of a
portfolio of European calls under correlated Black-Scholes dynamics.
"""

from .driver import RunConfig, RunReport, cost_vs_tol_study, fit_rates, level_study, run_mlmc
from .estimators import LevelAccumulator, MethodKind, nested_estimate, sample_level, telescope
from .model import ModelSpec, conditional_loss, paper_model
from .smoothing import (
    SmoothingParams,
    analytic_smoothed_indicator,
    numerical_smoothed_indicator,
)

__version__ = "0.1.0"

__all__ = [
    "ModelSpec",
    "paper_model",
    "conditional_loss",
    "SmoothingParams",
    "analytic_smoothed_indicator",
    "numerical_smoothed_indicator",
    "MethodKind",
    "LevelAccumulator",
    "sample_level",
    "nested_estimate",
    "telescope",
    "RunConfig",
    "RunReport",
    "run_mlmc",
    "level_study",
    "fit_rates",
    "cost_vs_tol_study",
]
