"""Token-exchanging text-vision fusion model on a from-scratch autodiff core."""

from .tensor import Tape, Tensor, backward_pass, grad_check

__all__ = ["Tape", "Tensor", "backward_pass", "grad_check"]
__version__ = "0.1.0"
