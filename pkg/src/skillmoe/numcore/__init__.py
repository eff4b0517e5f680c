"""Float64 tensors, reverse-mode autodiff, special functions and AdamW."""

from .gradcheck import GradCheckReport, grad_check
from .nn import MLP
from .optim import OptimizerState, adamw_step
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    concat,
    digamma,
    div,
    exp,
    lgamma,
    log,
    matmul,
    mean,
    mul,
    neg,
    power,
    reshape,
    softplus,
    sqrt,
    stack,
    stop_gradient,
    sub,
    swapaxes,
    take,
    tanh,
    tsum,
)

__all__ = [
    "GradCheckReport", "MLP", "OptimizerState", "ShapeError", "Tape", "Tensor",
    "active_tape", "adamw_step", "add", "as_tensor", "backward", "concat", "digamma",
    "div", "exp", "grad_check", "lgamma", "log", "matmul", "mean", "mul", "neg", "power",
    "reshape", "softplus", "sqrt", "stack", "stop_gradient", "sub", "swapaxes", "take",
    "tanh", "tsum",
]
