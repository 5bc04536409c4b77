"""Minimal tensor engine: reverse-mode autodiff, Adam, seeded streams."""

from . import ops
from .optim import AdamState, adam_step
from .rng import StreamSet, rng_stream
from .tensor import Tape, Tensor, backward, get_dtype, no_grad, set_debug, set_precision

__all__ = [
    "AdamState",
    "StreamSet",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "get_dtype",
    "no_grad",
    "ops",
    "rng_stream",
    "set_debug",
    "set_precision",
]
