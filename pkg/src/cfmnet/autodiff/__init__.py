"""A small NCHW tensor engine with reverse-mode differentiation."""

from .gradcheck import GradCheckReport, grad_check, sample_coordinates
from .nn import BatchNorm2d, Conv2d, ConvTranspose2x2, ConvUnit, Module
from .ops import (
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2x2,
    max_pool2x2,
    mse_loss,
    relu,
    slice_channels,
)
from .tensor import Tensor, high_precision, no_grad, topological_order

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2x2",
    "ConvUnit",
    "GradCheckReport",
    "Module",
    "Tensor",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "conv_transpose2x2",
    "grad_check",
    "high_precision",
    "max_pool2x2",
    "mse_loss",
    "no_grad",
    "relu",
    "sample_coordinates",
    "slice_channels",
    "topological_order",
]
