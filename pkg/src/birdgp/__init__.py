"""Bayesian image-on-image regression with learned GP bases and a particle-approximated network."""
from .basis import BasisNetConfig, BasisSet, VoxelGrid, fixed_kernel_basis, learn_basis, pca_basis
from .importance import importance_measure, linear_oracle_im
from .pipeline import FittedModel, PipelineConfig, fit_model, predict_interval, predict_intervals, predict_mean
from .projection import ProjectionPriors, gibbs_project, project_new
from .svgd import ParticleEnsemble, SvgdConfig, svgd_fit

__version__ = "0.1.0"

__all__ = [
    "BasisNetConfig",
    "BasisSet",
    "FittedModel",
    "ParticleEnsemble",
    "PipelineConfig",
    "ProjectionPriors",
    "SvgdConfig",
    "VoxelGrid",
    "fit_model",
    "fixed_kernel_basis",
    "gibbs_project",
    "importance_measure",
    "learn_basis",
    "linear_oracle_im",
    "pca_basis",
    "predict_interval",
    "predict_intervals",
    "predict_mean",
    "project_new",
    "svgd_fit",
]
