from . import functional
from .functional import ShapeError
from .nn import Conv2d, ConvBlock, Linear, Module, Parameter, Sequential
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step, clip_grad_norm
from .tensor import (
    GraphError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Adam",
    "AdamState",
    "Conv2d",
    "ConvBlock",
    "GraphError",
    "Linear",
    "Module",
    "NonFiniteGradientError",
    "Parameter",
    "Sequential",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "clip_grad_norm",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "set_default_dtype",
]
