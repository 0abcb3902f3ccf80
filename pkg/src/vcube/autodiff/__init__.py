"""Small reverse-mode automatic differentiation over float64 numpy arrays."""

from vcube.autodiff.core import Value, backward, finite_checks, no_grad, topological_order
from vcube.autodiff.gradcheck import grad_check, gradient_errors
from vcube.autodiff import ops

__all__ = [
    "Value",
    "backward",
    "finite_checks",
    "grad_check",
    "gradient_errors",
    "no_grad",
    "ops",
    "topological_order",
]
