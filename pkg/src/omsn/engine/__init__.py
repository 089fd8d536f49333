"""Minimal dense-tensor engine with reverse-mode gradients."""

from . import ops
from .gradcheck import ENGINE_OPS, grad_check
from .layers import BatchNormParams, ConvBNReLU, ConvParams, Linear, Module
from .ops import ShapeError
from .tensor import Tensor, no_grad

__all__ = [
    "BatchNormParams", "ConvBNReLU", "ConvParams", "ENGINE_OPS", "Linear", "Module",
    "ShapeError", "Tensor", "grad_check", "no_grad", "ops",
]
