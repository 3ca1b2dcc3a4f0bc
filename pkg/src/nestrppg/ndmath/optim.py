from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0, **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A ``None`` gradient is treated as zero.  Returns ``state`` (mutated).
    """
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError("adam_step: params, grads and moments differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if g is not None and np.shape(g) != p.shape:
            raise ShapeError(f"adam_step: grad shape {np.shape(g)} != param shape {p.shape}")
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != param shape {p.shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros(p.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.epsilon)
    return state
