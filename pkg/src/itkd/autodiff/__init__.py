"""Reverse-mode automatic differentiation over dense float64 tensors."""
from . import ops
from .checkpoint import CheckpointError, load_parameters, save_parameters
from .gradcheck import GradCheckReport, finite_diff_check
from .ops import PRIMITIVE_KINDS, apply_primitive
from .optim import (
    OptimizerState,
    Parameter,
    adam_step,
    cosine_lr,
    finalize_grads,
    parameter_hash,
    unique_parameters,
    zero_grads,
)
from .tensor import ShapeError, Tensor, backward, no_grad

__all__ = [
    "ops", "Tensor", "Parameter", "ShapeError", "backward", "no_grad",
    "apply_primitive", "PRIMITIVE_KINDS", "OptimizerState", "adam_step", "cosine_lr",
    "zero_grads", "finalize_grads", "parameter_hash", "unique_parameters",
    "finite_diff_check", "GradCheckReport", "save_parameters", "load_parameters",
    "CheckpointError",
]
