"""Adam with bias correction and optional per-parameter update scaling."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam over a named parameter collection.

    ``update_scale`` multiplies the final step of selected parameters, which
    is the same as giving them their own learning rate ``lr * scale``.
    Parameters whose ``.grad`` is ``None`` are skipped and keep their moments.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        update_scale: Mapping[str, float] | None = None,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.update_scale = dict(update_scale or {})
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        bad = [
            k for k, p in self.params.items()
            if p.grad is not None and not np.isfinite(p.grad).all()
        ]
        if bad:
            raise FloatingPointError(f"non-finite gradient in parameter(s): {', '.join(bad)}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            lr = self.lr * self.update_scale.get(k, 1.0)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
