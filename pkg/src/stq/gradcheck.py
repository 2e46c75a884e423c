"""Central finite differences, used to check analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def numerical_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` with respect to each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
