from . import nn, tape
from .fft import fft, ifft
from .gradcheck import grad_check
from .grid import ComplexField, GridField
from .params import ParamStore
from .tape import DomainError, Node, ShapeError, Tape, elementwise, reduce_sum
from .nn import circular_conv2d, dense, softmax_flat, spectral_conv1d

__all__ = [
    "ComplexField", "DomainError", "GridField", "Node", "ParamStore", "ShapeError", "Tape",
    "circular_conv2d", "dense", "elementwise", "fft", "grad_check", "ifft", "nn",
    "reduce_sum", "softmax_flat", "spectral_conv1d", "tape",
]
