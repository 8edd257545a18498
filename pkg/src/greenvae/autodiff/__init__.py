from . import ops
from .gradcheck import GradCheckReport, gradient_check, numeric_grad, relative_error
from .ops import forward_op
from .tensor import (
    Gradients,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_tape,
    shadow64,
)

__all__ = [
    "GradCheckReport",
    "Gradients",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "default_dtype",
    "forward_op",
    "get_default_dtype",
    "gradient_check",
    "no_tape",
    "numeric_grad",
    "ops",
    "relative_error",
    "shadow64",
]
