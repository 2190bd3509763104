"""Invertible wavelet-pyramid image denoiser on a small numpy autodiff engine."""
from ._kernels import BACKEND, set_threads
from .pyramid import ChannelPlan, ModelConfig, PyramidModel
from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = ["BACKEND", "ChannelPlan", "ModelConfig", "NonFiniteError", "PyramidModel", "ShapeError",
           "Tensor", "set_threads"]
__version__ = "0.1.0"
