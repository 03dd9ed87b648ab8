"""Bayesian Jolly-Seber finite mixtures for open-population capture-recapture."""
from .errors import InputError, InvariantViolation
from .kernels import BACKEND
from .model import CaptureData, GroupParams, ModelSpec, TimeGrid, build_time_grid, forward_loglik
from .priors import PriorConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CaptureData",
    "GroupParams",
    "InputError",
    "InvariantViolation",
    "ModelSpec",
    "PriorConfig",
    "TimeGrid",
    "build_time_grid",
    "forward_loglik",
]
