"""AdamW (decoupled weight decay) and plain SGD over Parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from udc.errors import DivergenceError
from udc.numerics.tensor import Parameter


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], lr: float,
               weight_decay: float, betas: tuple[float, float], step_count: int,
               moments: list[tuple[np.ndarray, np.ndarray]], eps: float = 1e-8,
               names: Sequence[str] | None = None) -> list[np.ndarray]:
    """One functional AdamW update; returns new parameter arrays and updates ``moments`` in place.

    ``step_count`` is 1-based (used for bias correction). A ``None`` grad leaves
    that parameter and its moments untouched.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise DivergenceError(f"non-finite gradient for parameter {label}; step aborted")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step_count
    c2 = 1.0 - b2 ** step_count
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        m, v = moments[i]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        moments[i] = (m, v)
        p = p * (1.0 - lr * weight_decay)
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
    return out


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        active = [i for i, p in enumerate(self.params) if p.requires_grad and p.grad is not None]
        if not active:
            return
        self.step_count += 1
        moments = [self.moments[i] for i in active]
        new = adamw_step([self.params[i].data for i in active],
                         [self.params[i].grad for i in active],
                         self.lr, self.weight_decay, self.betas, self.step_count, moments,
                         self.eps, names=[getattr(self.params[i], "name", "") or f"#{i}" for i in active])
        for j, i in enumerate(active):
            self.params[i].data = new[j]
            self.moments[i] = moments[j]


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.requires_grad and p.grad is not None:
                if not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(f"non-finite gradient for {p.name or 'parameter'}")
                p.data = p.data - self.lr * p.grad
