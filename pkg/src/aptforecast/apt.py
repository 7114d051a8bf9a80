"""Timestamp-conditioned prototype affine modulation.

A window's boundary timestamps are embedded as a sum of calendar-attribute
rows, each embedding is replaced by a softmax blend of its top-k most similar
prototypes, and two small MLPs turn the blended context into a scale ``gamma``
and shift ``beta``.  The normalised history is modulated by ``gamma * x + beta``
before the backbone and the forecast is mapped back with ``(y - beta) / gamma``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor as tn
from .data import LABELS, canonical_freq, tid_cardinality
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)

EPS_GAMMA = 1e-3

# (prototypes, top_k) per sampling rate
FREQ_DEFAULTS = {"daily": (5, 2), "hourly": (30, 3), "ten-minute": (40, 4)}


@dataclass(frozen=True)
class APTConfig:
    frequency: str = "hourly"
    channels: int = 1
    embed_dim: int = 20
    hidden: int = 32
    prototypes: int = 30
    top_k: int = 3
    labels: tuple[str, ...] = ("tid", "diw")
    channel_identity: bool = False
    per_channel_affine: bool = False
    no_topk: bool = False
    no_prototype: bool = False
    no_deapt: bool = False
    no_gamma: bool = False
    no_beta: bool = False

    def __post_init__(self):
        object.__setattr__(self, "frequency", canonical_freq(self.frequency))
        labels = tuple(lab.lower() for lab in self.labels)
        if self.frequency == "daily":
            labels = tuple(lab for lab in labels if lab != "tid")
        object.__setattr__(self, "labels", labels)
        if not labels or set(labels) - set(LABELS):
            raise ContractError(f"invalid timestamp labels {self.labels!r}")
        if self.embed_dim < 1 or self.hidden < 1:
            raise ContractError("embed_dim and hidden must be >= 1")
        if not 1 <= self.top_k <= self.prototypes:
            raise ContractError(f"top_k={self.top_k} must lie in [1, prototypes={self.prototypes}]")

    @classmethod
    def for_frequency(cls, frequency: str, **overrides) -> "APTConfig":
        n, k = FREQ_DEFAULTS[canonical_freq(frequency)]
        base = {"frequency": frequency, "prototypes": n, "top_k": k}
        if canonical_freq(frequency) == "daily":
            base["labels"] = ("diw",)
        base.update(overrides)
        return cls(**base)

    @property
    def per_channel(self) -> bool:
        return self.channel_identity or self.per_channel_affine

    def with_flags(self, **flags) -> "APTConfig":
        return replace(self, **flags)


def _table_rows(label: str, frequency: str) -> int:
    return {"tid": tid_cardinality(frequency), "diw": 7, "dim": 31}[label]


class MLPHead:
    """``D -> hidden -> ReLU -> 1``."""

    def __init__(self, prefix: str, dim: int, hidden: int, rng: np.random.Generator):
        b = 1.0 / np.sqrt(dim)
        self.prefix = prefix
        self.w1 = Tensor(rng.uniform(-b, b, (dim, hidden)), requires_grad=True)
        self.b1 = Tensor(rng.uniform(-b, b, (hidden,)), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-b, b, (hidden, 1)), requires_grad=True)
        self.b2 = Tensor(rng.uniform(-b, b, (1,)), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}

    def __call__(self, t: Tensor) -> Tensor:
        lead = t.shape[:-1]
        flat = tn.reshape(t, (-1, t.shape[-1]))
        h = tn.matmul(flat, self.w1)
        h = tn.relu(h + tn.broadcast_to(self.b1, h.shape))
        out = tn.matmul(h, self.w2)
        out = out + tn.broadcast_to(self.b2, out.shape)
        return tn.reshape(out, lead)


class APTModel:
    def __init__(self, config: APTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        D = config.embed_dim
        b = 1.0 / np.sqrt(D)
        self.tables = {
            lab: Tensor(rng.uniform(-b, b, (_table_rows(lab, config.frequency), D)), requires_grad=True)
            for lab in config.labels
        }
        self.proto = Tensor(rng.uniform(-b, b, (config.prototypes, D)), requires_grad=True)
        self.identity = (
            Tensor(rng.uniform(-b, b, (config.channels, D)), requires_grad=True)
            if config.per_channel else None
        )
        self.head_gamma = MLPHead("apt.mlp_gamma", D, config.hidden, rng)
        self.head_beta = MLPHead("apt.mlp_beta", D, config.hidden, rng)
        # scale starts near 1; a near-zero gamma blows up the inverse modulation
        self.head_gamma.b2.data = np.ones(1)
        self.gamma_clamps = 0

    def parameters(self) -> dict[str, Tensor]:
        params = {f"apt.{lab}": t for lab, t in self.tables.items()}
        params["apt.proto"] = self.proto
        if self.identity is not None:
            params["apt.id"] = self.identity
        params.update(self.head_gamma.parameters())
        params.update(self.head_beta.parameters())
        for name, p in params.items():
            p.name = name
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy ``apt.*`` blocks into this model; any shape difference is an error."""
        params = self.parameters()
        problems = []
        for name, p in params.items():
            if name not in arrays:
                problems.append(f"{name}: missing")
            elif arrays[name].shape != p.shape:
                problems.append(f"{name}: checkpoint {arrays[name].shape} vs model {p.shape}")
        for name in arrays:
            if name.startswith("apt.") and name not in params:
                problems.append(f"{name}: unexpected block")
        if problems:
            raise ContractError("incompatible APT parameters:\n  " + "\n  ".join(problems))
        for name, p in params.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    def embedding_rows(self) -> Tensor:
        """Stacked timestamp tables and prototypes, the rows penalised by the orthogonal loss."""
        return tn.concat([self.tables[lab] for lab in self.config.labels] + [self.proto], axis=0)

    def set_neutral_heads(self) -> None:
        """Zero every head weight and set the output biases so that (gamma, beta) = (1, 0)."""
        for head, out in ((self.head_gamma, 1.0), (self.head_beta, 0.0)):
            for p in (head.w1, head.b1, head.w2):
                p.data = np.zeros_like(p.data)
            head.b2.data = np.full_like(head.b2.data, out)


@dataclass
class MatchResult:
    weights: Tensor | None        # (B, N), None when prototypes are bypassed
    aggregated: Tensor            # (B, D)
    selected: np.ndarray | None = None   # (B, k) prototype indices


@dataclass
class AffineParams:
    gamma: Tensor                 # (B,) or (B, C)
    beta: Tensor
    clamped: int = 0


@dataclass
class Context:
    embedding: Tensor             # (B, D) or (B, C, D)
    weights: list[Tensor] = field(default_factory=list)


def embed_timestamp(features: Mapping[str, np.ndarray], model: APTModel) -> Tensor:
    """Sum of the attribute-table rows selected by ``features`` (label -> index array)."""
    out = None
    for lab in model.config.labels:
        if lab not in features or features[lab] is None:
            raise ContractError(f"timestamp feature {lab!r} is missing")
        row = tn.take(model.tables[lab], np.atleast_1d(features[lab]))
        out = row if out is None else out + row
    return out


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row; ties go to the lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def match_prototypes(
    t: Tensor,
    proto: Tensor,
    k: int,
    no_topk: bool = False,
    no_prototype: bool = False,
) -> MatchResult:
    if t.data.ndim == 1:
        t = tn.reshape(t, (1, -1))
    if no_prototype:
        return MatchResult(None, t)
    scores = tn.matmul(t, tn.transpose(proto, (1, 0)))                    # B, N
    n = proto.shape[0]
    if no_topk or k >= n:
        mask = None
        selected = np.broadcast_to(np.arange(n), scores.shape)
    else:
        selected = select_top_k(scores.data, k)
        mask = np.zeros(scores.shape, dtype=bool)
        np.put_along_axis(mask, selected, True, axis=-1)
    weights = tn.softmax(scores, mask)
    return MatchResult(weights, tn.matmul(weights, proto), np.asarray(selected))


def aggregate_context(
    hist_features: Mapping[str, np.ndarray],
    future_features: Mapping[str, np.ndarray],
    model: APTModel,
) -> Context:
    """Prototype-matched history-start plus future-end context, one row per sample."""
    cfg = model.config
    parts = []
    weights = []
    for feats in (hist_features, future_features):
        res = match_prototypes(embed_timestamp(feats, model), model.proto, cfg.top_k,
                               cfg.no_topk, cfg.no_prototype)
        parts.append(res.aggregated)
        if res.weights is not None:
            weights.append(res.weights)
    ctx = parts[0] + parts[1]
    if model.identity is not None:
        B, D = ctx.shape
        C = model.identity.shape[0]
        ctx = (tn.broadcast_to(tn.reshape(ctx, (B, 1, D)), (B, C, D))
               + tn.broadcast_to(model.identity, (B, C, D)))
    return Context(ctx, weights)


def affine_heads(ctx: Tensor, model: APTModel) -> AffineParams:
    cfg = model.config
    lead = ctx.shape[:-1]
    if cfg.no_gamma:
        gamma, clamped = Tensor(np.ones(lead)), 0
    else:
        gamma, clamped = tn.clamp_magnitude(model.head_gamma(ctx), EPS_GAMMA)
    beta = Tensor(np.zeros(lead)) if cfg.no_beta else model.head_beta(ctx)
    model.gamma_clamps += clamped
    return AffineParams(gamma, beta, clamped)


def _expand_affine(v: Tensor, shape: tuple[int, ...]) -> Tensor:
    if v.data.ndim == 1:          # channel-shared: (B,)
        v = tn.reshape(v, (shape[0], 1, 1))
    else:                         # per channel: (B, C)
        v = tn.reshape(v, (shape[0], 1, shape[2]))
    return tn.broadcast_to(v, shape)


def apply_apt(x: Tensor, params: AffineParams) -> Tensor:
    """``gamma * x + beta`` with the affine broadcast over the time axis."""
    return _expand_affine(params.gamma, x.shape) * x + _expand_affine(params.beta, x.shape)


def invert_apt(
    m: Tensor,
    params: AffineParams,
    sigma: np.ndarray | None = None,
    no_deapt: bool = False,
) -> Tensor:
    """``(sigma / gamma) * (m - beta)``; ``sigma`` defaults to 1 (the pipeline rescales later)."""
    if no_deapt:
        out = m
    else:
        small = np.abs(params.gamma.data) < EPS_GAMMA
        if small.any():
            raise ContractError(
                f"invert_apt: |gamma| < {EPS_GAMMA} for sample {int(np.argwhere(small)[0][0])}"
            )
        out = (m - _expand_affine(params.beta, m.shape)) / _expand_affine(params.gamma, m.shape)
    if sigma is not None:
        out = out * Tensor(np.broadcast_to(sigma, m.shape))
    return out


# self-supervised losses ----------------------------------------------------

def loss_orth(rows: Tensor) -> Tensor:
    """Squared off-diagonal plus squared unit-norm deviation of the row Gram matrix."""
    n = rows.shape[0]
    gram = tn.matmul(rows, tn.transpose(rows, (1, 0)))
    eye = np.eye(n)
    off = gram * Tensor(1.0 - eye)
    diag = Tensor(eye) - gram * Tensor(eye)
    return tn.sum_(tn.square(off)) + tn.sum_(tn.square(diag))


def loss_balance(weights: Tensor) -> Tensor:
    """Squared deviation of each prototype's batch usage share from 1/N."""
    n = weights.shape[-1]
    total = float(weights.data.sum())
    if total == 0.0:
        warnings.warn("loss_balance: all prototype weights are zero")
        return Tensor(1.0 / n)
    shares = tn.sum_(weights, axis=0) / tn.broadcast_to(tn.sum_(weights), (n,))
    return tn.sum_(tn.square(shares - 1.0 / n))


def _reg_term(v: Tensor) -> Tensor:
    if v.data.ndim == 2:          # per channel: one term per column
        terms = [_reg_term(v[:, c]) for c in range(v.shape[1])]
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out
    B = v.shape[0]
    norm_gap = tn.square(1.0 - tn.l2norm(v))
    centred = tn.square(tn.sum_(v))
    return (norm_gap + centred) / float(B)


def loss_affine_reg(gamma: Tensor | None, beta: Tensor | None) -> Tensor:
    """Unit-norm and zero-sum penalty over the batch, for each affine family given."""
    terms = [_reg_term(v) for v in (gamma, beta) if v is not None]
    if not terms:
        return Tensor(0.0)
    return terms[0] + terms[1] if len(terms) == 2 else terms[0]


def loss_apt(orth: Tensor, balance: Tensor, reg: Tensor) -> Tensor:
    return orth + balance + reg
