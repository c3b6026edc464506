"""qsense: data-free post-training mixed-precision quantization toolkit."""

from .tensor import Tensor, Tape, backward  # noqa: F401

__version__ = "0.1.0"
