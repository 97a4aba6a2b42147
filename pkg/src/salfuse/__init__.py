"""Specificity-preserving RGB-D saliency fusion, desk scale.

A from-scratch differentiable tensor engine, the two-stream fusion network
with switchable ablation variants, its boundary-weighted training loss,
bit-exact saliency metrics, and a CLI harness around all of it.
"""

from .config import LossConfig, ModelConfig, OptimizerConfig, RunConfig
from .errors import NumericsError, SalfuseError, ValidationError
from .model import FusionModel, build_model, combine_specific_outputs

__version__ = "0.1.0"

__all__ = [
    "FusionModel",
    "LossConfig",
    "ModelConfig",
    "NumericsError",
    "OptimizerConfig",
    "RunConfig",
    "SalfuseError",
    "ValidationError",
    "build_model",
    "combine_specific_outputs",
    "__version__",
]
