"""Mixtures of partially linear experts fitted by kernel-profiled ECM."""

from ._types import (
    BandwidthInfeasibleError,
    Dataset,
    DegenerateComponentError,
    ExpertParams,
    FitResult,
    GatingParams,
    InitializationError,
    ModelConfig,
    NumericalError,
    ValidationError,
    load_dataset,
    validate_fit_result,
    validate_params,
)
from .ecm import fit, initialize, observed_loglik
from .estimator import MixtureOfPartiallyLinearExperts
from .selection import select

__version__ = "0.1.0"

__all__ = [
    "BandwidthInfeasibleError",
    "Dataset",
    "DegenerateComponentError",
    "ExpertParams",
    "FitResult",
    "GatingParams",
    "InitializationError",
    "MixtureOfPartiallyLinearExperts",
    "ModelConfig",
    "NumericalError",
    "ValidationError",
    "fit",
    "initialize",
    "load_dataset",
    "observed_loglik",
    "select",
    "validate_fit_result",
    "validate_params",
]
