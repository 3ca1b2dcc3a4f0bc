from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NonFiniteError
from .tensor import Tensor, no_grad


def numeric_gradient(loss_fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float) -> np.ndarray:
    """Central finite differences of ``loss_fn`` at ``point``, one coordinate at a time."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn(Tensor(x.copy())).data)
            flat[i] = orig - step
            fm = float(loss_fn(Tensor(x.copy())).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"grad_check: non-finite loss near coordinate {i}")
            grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def analytic_gradient(loss_fn: Callable[[Tensor], Tensor], point) -> np.ndarray:
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
               requires_grad=True)
    loss = loss_fn(x)
    loss.backward()
    return np.zeros(x.shape) if x.grad is None else x.grad


def grad_check(loss_fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = point.data if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64)
    analytic = analytic_gradient(loss_fn, base)
    numeric = numeric_gradient(loss_fn, base, step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
