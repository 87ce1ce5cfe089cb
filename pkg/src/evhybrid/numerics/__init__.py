from . import ops
from .gradcheck import GradCheckReport, grad_check
from .tensor import NARROW, WIDE, GradTape, Tensor, active_tape

__all__ = [
    "NARROW",
    "WIDE",
    "GradCheckReport",
    "GradTape",
    "Tensor",
    "active_tape",
    "grad_check",
    "ops",
]
