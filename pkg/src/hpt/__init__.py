"""Heterogeneous pre-trained transformer policies on a small numpy autodiff core."""

from .model import EmbodimentSpec, HptModel, ModelConfig
from .rng import RngState
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["EmbodimentSpec", "HptModel", "ModelConfig", "RngState", "Tensor", "no_grad"]
