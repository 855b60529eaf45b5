"""Adaptive spatial pattern capsule network for hyperspectral image classification."""

from .tensor import Tape, Tensor, backward, no_grad, precision, set_default_dtype

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "no_grad", "precision", "set_default_dtype"]
