"""Debiased fusion of labeled, blockwise-missing and unlabeled samples for GLM coefficients."""

__version__ = "0.1.0"

from .data import FusedDataset, GlmSpec, LabeledMissingSource, load_dataset, save_dataset, unit_contrast
from .errors import DefuseError, NumericalError, ValidationError
from .estimator import EstimateReport, FusionContext, PipelineConfig, estimate_full_vector

__all__ = [
    "__version__",
    "DefuseError",
    "EstimateReport",
    "FusedDataset",
    "FusionContext",
    "GlmSpec",
    "LabeledMissingSource",
    "NumericalError",
    "PipelineConfig",
    "ValidationError",
    "estimate_full_vector",
    "load_dataset",
    "save_dataset",
    "unit_contrast",
]
