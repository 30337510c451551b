from story.numerics.tensor import Tensor, default_dtype, grad_enabled, no_grad, precision

__all__ = ["Tensor", "default_dtype", "grad_enabled", "no_grad", "precision"]
