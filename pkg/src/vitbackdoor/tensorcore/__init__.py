"""Small dense-tensor layer: numpy ops with analytic gradients, Adam, and a gradient checker."""

from . import ops
from .gradcheck import (OP_REGISTRY, GradCheckReport, check_model_gradients, check_registered, grad_check,
                        relative_error)
from .optim import AdamState, Parameter, adam_step

__all__ = [
    "ops",
    "OP_REGISTRY",
    "GradCheckReport",
    "check_model_gradients",
    "check_registered",
    "grad_check",
    "relative_error",
    "AdamState",
    "Parameter",
    "adam_step",
]
