"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from udc.numerics.tensor import Parameter, Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Parameter, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    base = param.data
    with no_grad():
        for idx in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[idx] += step
            param.data = shifted
            up = fn().item()
            shifted = base.copy()
            shifted[idx] -= step
            param.data = shifted
            down = fn().item()
            grad[idx] = (up - down) / (2.0 * step)
    param.data = base
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Parameter],
                    step: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``params``.

    Entries whose true gradient is below ``1e-6`` in magnitude are compared on
    an absolute scale so that round-off near zero does not dominate.
    """
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(fn, p, step)
        worst = max(worst, max_relative_error(analytic, numeric, floor=1e-6))
    return worst
