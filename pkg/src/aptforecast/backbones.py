"""Channel-independent linear forecasters.

Both models take a normalised window ``(B, L, C)`` and return ``(B, H, C)``,
sharing one set of weights across channels.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import ContractError, Tensor


class ConfigError(ValueError):
    pass


class LinearBackbone:
    kind = "linear"

    def __init__(self, L: int, H: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(L)
        self.L, self.H = L, H
        self.weight = Tensor(rng.uniform(-bound, bound, (H, L)), requires_grad=True, name="backbone.weight")
        self.bias = Tensor(rng.uniform(-bound, bound, (H,)), requires_grad=True, name="backbone.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"backbone.weight": self.weight, "backbone.bias": self.bias}

    def parameter_count(self) -> int:
        return self.H * self.L + self.H

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forecast(x, self)


class SparseTSFBackbone:
    """Downsample by ``period``, forecast each phase with one shared map, re-interleave."""

    kind = "sparsetsf"

    def __init__(self, L: int, H: int, period: int, rng: np.random.Generator | None = None):
        if period < 1 or L % period or H % period:
            raise ConfigError(f"period {period} must divide L={L} and H={H}")
        rng = rng or np.random.default_rng(0)
        self.L, self.H, self.period = L, H, period
        n_in, n_out = L // period, H // period
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_out, n_in)), requires_grad=True, name="backbone.weight")
        self.bias = Tensor(rng.uniform(-bound, bound, (n_out,)), requires_grad=True, name="backbone.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"backbone.weight": self.weight, "backbone.bias": self.bias}

    def parameter_count(self) -> int:
        n_out = self.H // self.period
        return n_out * (self.L // self.period) + n_out

    def __call__(self, x: Tensor) -> Tensor:
        return sparse_tsf_forecast(x, self)


def _check_input(x: Tensor, L: int) -> None:
    if x.data.ndim != 3 or x.shape[1] != L:
        raise ContractError(f"backbone expects (B, {L}, C), got {x.shape}")


def _phase_linear(x: Tensor, weight: Tensor, bias: Tensor, period: int, H: int) -> Tensor:
    B, L, C = x.shape
    w = period
    series = tn.transpose(x, (0, 2, 1))                                   # B, C, L
    # phase p of the downsampled view is series[..., p::w]
    phases = tn.transpose(tn.reshape(series, (B, C, L // w, w)), (0, 1, 3, 2))  # B, C, w, L/w
    out = tn.matmul(phases, tn.transpose(weight, (1, 0)))                 # B, C, w, H/w
    out = out + tn.broadcast_to(bias, out.shape)
    out = tn.reshape(tn.transpose(out, (0, 1, 3, 2)), (B, C, H))          # re-interleave
    return tn.transpose(out, (0, 2, 1))


def linear_forecast(x: Tensor, model: LinearBackbone) -> Tensor:
    _check_input(x, model.L)
    # period 1 keeps the arithmetic identical to the sparse path
    return _phase_linear(x, model.weight, model.bias, 1, model.H)


def sparse_tsf_forecast(x: Tensor, model: SparseTSFBackbone) -> Tensor:
    _check_input(x, model.L)
    return _phase_linear(x, model.weight, model.bias, model.period, model.H)


def build_backbone(kind: str, L: int, H: int, period: int | None = None, rng=None):
    if kind == "linear":
        return LinearBackbone(L, H, rng)
    if kind == "sparsetsf":
        if period is None:
            raise ConfigError("sparsetsf needs a period")
        return SparseTSFBackbone(L, H, period, rng)
    raise ContractError(f"unknown backbone {kind!r}")
