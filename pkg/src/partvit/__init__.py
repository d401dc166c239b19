"""Part-based face Vision Transformer on a minimal numpy autodiff engine."""

from .autodiff import Tensor, backward, gradient_check, zero_grads

__all__ = ["Tensor", "backward", "gradient_check", "zero_grads"]
__version__ = "0.1.0"
