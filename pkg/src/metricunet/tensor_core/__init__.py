"""Minimal reverse-mode autodiff engine with the layers the segmentation nets use."""
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .gradcheck import gradient_check
from .ops import (
    batchnorm2d,
    concat,
    conv2d,
    maxpool2d,
    relu,
    softmax,
    softmax_cross_entropy,
    transposed_conv2d,
)
from .optim import poly_lr, sgd_step
from .tensor import (
    Parameter,
    Tensor,
    add,
    get_default_dtype,
    grad_enabled,
    no_grad,
    precision,
    scale,
    set_default_dtype,
)

__all__ = [
    "FORMAT_VERSION",
    "Parameter",
    "Tensor",
    "add",
    "batchnorm2d",
    "concat",
    "conv2d",
    "get_default_dtype",
    "grad_enabled",
    "gradient_check",
    "load_checkpoint",
    "maxpool2d",
    "no_grad",
    "poly_lr",
    "precision",
    "relu",
    "save_checkpoint",
    "scale",
    "set_default_dtype",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
    "transposed_conv2d",
]
