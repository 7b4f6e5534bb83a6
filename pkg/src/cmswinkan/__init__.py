"""KAN-augmented Swin classifier with multi-scale fusion, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .model import CMSwinKAN, build_model, extract_features, load_checkpoint, model_forward, save_checkpoint
from .tensor import DimensionError, Tensor, no_grad

__all__ = [
    "CMSwinKAN",
    "DimensionError",
    "Tensor",
    "build_model",
    "extract_features",
    "load_checkpoint",
    "model_forward",
    "no_grad",
    "save_checkpoint",
]
