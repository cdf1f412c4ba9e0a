"""
Chaotic-SDE Sensitivity Framework
Engines package containing the models, estimators and Monte Carlo drivers.
"""

from .base_engine import BaseEngine
from .errors import (
    BlowupLimitExceeded,
    DegenerateEnvelope,
    InvalidParameter,
    MaxLevelsExceeded,
    NonFiniteState,
    SensitivityError,
    UnsupportedKind,
)
from .models import LorenzModel, ModelParams, OrnsteinUhlenbeckModel, SdeModel, build_model, default_params, ou_model
from .integrate import EstimatorKind, NoiseBatch, NoiseStream, StepPolicy, simulate_augmented, simulate_batch
from .estimators import EstimatorSpec, FdResult, fd_run, fd_sensitivity, sample_batch
from .mlmc import MlmcConfig, MlmcEngine, MlmcReport, mlmc_driver
from .extrapolation import RichardsonEngine, RRScheme, ode_reference, ode_sensitivity, rr_estimate, rr_weights
from .harness import ExperimentConfig, FitResult, MCStats, MonteCarloEngine, fit_loglinear, mc_run

__all__ = [
    'BaseEngine',
    'SensitivityError',
    'InvalidParameter',
    'NonFiniteState',
    'UnsupportedKind',
    'MaxLevelsExceeded',
    'DegenerateEnvelope',
    'BlowupLimitExceeded',
    'SdeModel',
    'ModelParams',
    'LorenzModel',
    'OrnsteinUhlenbeckModel',
    'build_model',
    'default_params',
    'ou_model',
    'EstimatorKind',
    'NoiseStream',
    'NoiseBatch',
    'StepPolicy',
    'simulate_augmented',
    'simulate_batch',
    'EstimatorSpec',
    'sample_batch',
    'fd_sensitivity',
    'fd_run',
    'FdResult',
    'MlmcConfig',
    'MlmcEngine',
    'MlmcReport',
    'mlmc_driver',
    'RRScheme',
    'RichardsonEngine',
    'rr_weights',
    'rr_estimate',
    'ode_reference',
    'ode_sensitivity',
    'ExperimentConfig',
    'FitResult',
    'MCStats',
    'MonteCarloEngine',
    'fit_loglinear',
    'mc_run'
]
