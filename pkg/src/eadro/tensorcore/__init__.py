from . import ops
from .gradcheck import grad_check
from .store import CheckpointError, ParameterStore, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, default_dtype, precision, tensor

__all__ = [
    "ops", "grad_check", "CheckpointError", "ParameterStore", "load_checkpoint", "save_checkpoint",
    "NonFiniteError", "ShapeError", "Tensor", "as_tensor", "default_dtype", "precision", "tensor",
]
