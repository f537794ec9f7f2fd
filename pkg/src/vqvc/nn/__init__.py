from .tensor import GraphError, Parameter, Tensor, as_tensor, no_grad
from .functional import ConfigError, ShapeError
from .optim import AdamState, adam_step

__all__ = ["Tensor", "Parameter", "GraphError", "ShapeError", "ConfigError", "AdamState",
           "adam_step", "as_tensor", "no_grad"]
