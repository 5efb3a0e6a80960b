from . import ops, reference
from .core import GradTape, OpRecord, Tensor, backward, is_grad_enabled, no_grad, scope
from .gradcheck import check_gradients, numerical_gradient, relative_error

__all__ = [
    "GradTape",
    "OpRecord",
    "Tensor",
    "backward",
    "check_gradients",
    "is_grad_enabled",
    "no_grad",
    "numerical_gradient",
    "ops",
    "reference",
    "relative_error",
    "scope",
]
