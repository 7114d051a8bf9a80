"""Instance normalisation around the forecasting backbone.

``revin`` standardises each window and channel by its own history mean and
population standard deviation; ``none`` is the identity.  The optional static
affine (per-channel weight and bias) is applied after standardisation and
undone before de-standardisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ContractError, Tensor

EPS_SIGMA = 1e-5
STRATEGIES = ("none", "revin")


@dataclass
class NormState:
    strategy: str
    mu_l: np.ndarray
    sigma_l: np.ndarray
    mu_h: np.ndarray
    sigma_h: np.ndarray
    clamped: int = 0


class StaticAffine:
    def __init__(self, channels: int, enabled: bool = False):
        self.enabled = enabled
        self.weight = Tensor(np.ones(channels), requires_grad=enabled, name="norm.affine_weight")
        self.bias = Tensor(np.zeros(channels), requires_grad=enabled, name="norm.affine_bias")

    def parameters(self) -> dict[str, Tensor]:
        if not self.enabled:
            return {}
        return {"norm.affine_weight": self.weight, "norm.affine_bias": self.bias}


def _check_strategy(strategy: str) -> None:
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown normalization strategy {strategy!r}")


def normalize(x, strategy: str = "revin", affine: StaticAffine | None = None) -> tuple[Tensor, NormState]:
    """Normalise a window of shape ``(..., L, C)``."""
    _check_strategy(strategy)
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    stat_shape = data.shape[:-2] + (1, data.shape[-1])
    if strategy == "none":
        zeros, ones = np.zeros(stat_shape), np.ones(stat_shape)
        state = NormState(strategy, zeros, ones, zeros, ones)
        out = x if isinstance(x, Tensor) else Tensor(data)
    else:
        if data.shape[-2] < 2:
            raise ContractError("revin needs at least two history steps")
        mu = data.mean(axis=-2, keepdims=True)
        sigma = np.sqrt(((data - mu) ** 2).mean(axis=-2, keepdims=True))
        degenerate = sigma < EPS_SIGMA
        sigma = np.where(degenerate, EPS_SIGMA, sigma)
        state = NormState(strategy, mu, sigma, mu, sigma, clamped=int(degenerate.sum()))
        xt = x if isinstance(x, Tensor) else Tensor(data)
        out = (xt - tn.Tensor(np.broadcast_to(mu, data.shape))) / tn.Tensor(np.broadcast_to(sigma, data.shape))
    if affine is not None and affine.enabled:
        out = out * tn.broadcast_to(affine.weight, out.shape) + tn.broadcast_to(affine.bias, out.shape)
    return out, state


def denormalize(
    y: Tensor,
    state: NormState,
    strategy: str = "revin",
    affine: StaticAffine | None = None,
) -> Tensor:
    """Invert :func:`normalize` on a forecast of shape ``(..., H, C)``."""
    _check_strategy(strategy)
    if state.strategy != strategy:
        raise ContractError(f"state from {state.strategy!r} cannot denormalize under {strategy!r}")
    if not isinstance(y, Tensor):
        y = Tensor(y)
    if affine is not None and affine.enabled:
        y = (y - tn.broadcast_to(affine.bias, y.shape)) / tn.broadcast_to(affine.weight, y.shape)
    if strategy == "none":
        return y
    sigma = Tensor(np.broadcast_to(state.sigma_h, y.shape))
    mu = Tensor(np.broadcast_to(state.mu_h, y.shape))
    return y * sigma + mu
