"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Update ``params`` in place. Parameters whose gradient is all-zero are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"adam: grad {g.shape} / moment {m.shape} do not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
