from .tensor import Tensor, Tape, Node, backward, trace, no_grad
from .primitives import apply_primitive, registered_primitives, is_linear_primitive
from .gradcheck import grad_check
from .checkpoint import save_checkpoint, load_checkpoint
from . import functional

__all__ = [
    "Tensor", "Tape", "Node", "backward", "trace", "no_grad",
    "apply_primitive", "registered_primitives", "is_linear_primitive",
    "grad_check", "save_checkpoint", "load_checkpoint", "functional",
]
