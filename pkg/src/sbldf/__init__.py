"""Sparse Bayesian learning with dynamic filtering."""
from .model import (
    Dictionary,
    DomainError,
    HyperPriors,
    NumericalFailure,
    Prediction,
    SblEstimate,
    dyn_objective,
    effective_prior_density,
    gamma_dyn_optimum,
    map_prediction_to_hyperpriors,
    marginal_covariance,
    neg_log_likelihood,
    posterior_moments,
    rmse,
)
from .em import EmOptions, em_step, prune, solve_em
from .fml import FmlOptions, solve_fml

__version__ = "0.1.0"
