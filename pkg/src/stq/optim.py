from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: list[Tensor],
    grads: dict[Tensor, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decay: set[int] | None = None,
) -> None:
    """One bias-corrected Adam update, replacing each parameter's data array.

    L2 decay ``weight_decay * p`` is added to the gradient of parameters whose
    ``id`` is in ``decay``.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        key = id(p)
        if weight_decay and decay and key in decay:
            g = g + weight_decay * p.data
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[key]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[key], state.v[key] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        set_data(p, p.data - update.astype(p.dtype))


def set_data(p: Tensor, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype=p.dtype)
    arr.setflags(write=False)
    p.data = arr
