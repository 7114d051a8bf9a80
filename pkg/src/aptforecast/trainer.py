"""End-to-end forecasting pipeline, APT pretraining, joint training and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import apt as aptm
from . import tensor as tn
from .backbones import build_backbone
from .config import ExperimentConfig
from .data import SeriesDataset, load_csv, window_starts
from .normalization import StaticAffine, denormalize, normalize
from .optim import Adam
from .tensor import Tensor

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
EVAL_CHUNK = 1024


class DivergenceError(RuntimeError):
    pass


@dataclass
class MetricsReport:
    seed: int
    mae: dict[str, float] = field(default_factory=dict)
    mse: dict[str, float] = field(default_factory=dict)
    pretrain_trace: list[float] = field(default_factory=list)
    train_trace: list[float] = field(default_factory=list)
    val_trace: list[float] = field(default_factory=list)
    best_epoch: int = -1
    gamma_clamps: int = 0
    sigma_clamps: int = 0
    prototype_usage: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mae": self.mae,
            "mse": self.mse,
            "best_epoch": self.best_epoch,
            "pretrain_trace": self.pretrain_trace,
            "train_trace": self.train_trace,
            "val_trace": self.val_trace,
            "gamma_clamps": self.gamma_clamps,
            "sigma_clamps": self.sigma_clamps,
            "prototype_usage": self.prototype_usage,
        }


def loss_normal(state) -> Tensor:
    """Auxiliary normalisation loss; the implemented strategies carry none."""
    return Tensor(0.0)


class Pipeline:
    """normalize -> APT -> backbone -> de-APT -> denormalize."""

    def __init__(self, cfg: ExperimentConfig, channels: int):
        self.cfg = cfg
        self.channels = channels
        seed = cfg.seed
        self.backbone = build_backbone(
            cfg.backbone, cfg.L, cfg.H, cfg.resolved_period,
            rng=np.random.default_rng([seed, 1]),
        )
        self.affine = StaticAffine(channels, enabled=cfg.revin_affine)
        self.apt: aptm.APTModel | None = None
        if cfg.apt:
            self.apt = aptm.APTModel(cfg.apt_config(channels), seed=int(np.random.default_rng([seed, 2]).integers(2**31)))
            if cfg.neutral_init:
                self.apt.set_neutral_heads()
        self.sigma_clamps = 0

    # parameters ------------------------------------------------------------
    def base_parameters(self) -> dict[str, Tensor]:
        params = dict(self.backbone.parameters())
        params.update(self.affine.parameters())
        return params

    def apt_parameters(self) -> dict[str, Tensor]:
        return self.apt.parameters() if self.apt is not None else {}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.base_parameters(), **self.apt_parameters()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: p.data.copy() for k, p in self.backbone.parameters().items()}
        arrays["norm.affine_weight"] = self.affine.weight.data.copy()
        arrays["norm.affine_bias"] = self.affine.bias.data.copy()
        if self.apt is not None:
            arrays.update(self.apt.state_arrays())
        return arrays

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> list[str]:
        """Load matching blocks; returns the names that were skipped."""
        skipped = []
        targets = dict(self.backbone.parameters())
        targets["norm.affine_weight"] = self.affine.weight
        targets["norm.affine_bias"] = self.affine.bias
        for name, p in targets.items():
            if name in arrays and arrays[name].shape == p.shape:
                p.data = np.array(arrays[name], dtype=np.float64)
            elif strict:
                raise tn.ContractError(f"checkpoint block {name} missing or mis-shaped")
            else:
                skipped.append(name)
        if self.apt is not None:
            self.apt.load_arrays(arrays)
        return skipped

    # forward ---------------------------------------------------------------
    def forward(self, x: np.ndarray, hist_feats, fut_feats):
        cfg = self.cfg
        xn, state = normalize(x, cfg.norm, self.affine)
        self.sigma_clamps += state.clamped
        params = ctx = None
        if self.apt is not None:
            ctx = aptm.aggregate_context(hist_feats, fut_feats, self.apt)
            params = aptm.affine_heads(ctx.embedding, self.apt)
            xn = aptm.apply_apt(xn, params)
        out = self.backbone(xn)
        if params is not None:
            out = aptm.invert_apt(out, params, no_deapt=self.apt.config.no_deapt)
        pred = denormalize(out, state, cfg.norm, self.affine)
        return pred, ctx, params, state


class Batcher:
    """Assembles windows and their boundary calendar indices from start offsets."""

    def __init__(self, ds: SeriesDataset, L: int, H: int):
        self.ds, self.L, self.H = ds, L, H
        self.cal = ds.calendar()
        self.offsets_x = np.arange(L)
        self.offsets_y = np.arange(L, L + H)

    def starts(self, split: str) -> np.ndarray:
        return window_starts(self.ds, self.L, self.H, split)

    def batch(self, starts: np.ndarray):
        v = self.ds.values
        x = v[starts[:, None] + self.offsets_x]
        y = v[starts[:, None] + self.offsets_y]
        end = starts + self.L + self.H - 1
        hist = {lab: arr[starts] for lab, arr in self.cal.items()}
        fut = {lab: arr[end] for lab, arr in self.cal.items()}
        return x, y, hist, fut


def _epoch_batches(starts: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(starts)
    n = len(perm) // batch_size
    if n == 0 and len(perm):
        return [perm]
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n)]


def pretrain_losses(pipe: Pipeline, hist, fut) -> tuple[Tensor, dict[str, float]]:
    cfg = pipe.cfg
    model = pipe.apt
    ctx = aptm.aggregate_context(hist, fut, model)
    params = aptm.affine_heads(ctx.embedding, model)
    zero = Tensor(0.0)
    orth = zero if cfg.wo_orth else aptm.loss_orth(model.embedding_rows())
    if cfg.wo_balance or not ctx.weights:
        bal = zero
    else:
        bal = aptm.loss_balance(tn.concat(ctx.weights, axis=0))
    if cfg.wo_reg:
        reg = zero
    else:
        reg = aptm.loss_affine_reg(
            None if model.config.no_gamma else params.gamma,
            None if model.config.no_beta else params.beta,
        )
    parts = {"orth": orth.item(), "balance": bal.item(), "reg": reg.item()}
    return aptm.loss_apt(orth, bal, reg), parts


def pretrain_apt(pipe: Pipeline, batcher: Batcher) -> list[float]:
    """Self-supervised APT epochs with the backbone and normalisation frozen."""
    cfg = pipe.cfg
    if pipe.apt is None or cfg.pretrain_epochs == 0:
        return []
    frozen = pipe.base_parameters()
    saved = {k: p.requires_grad for k, p in frozen.items()}
    for p in frozen.values():
        p.requires_grad = False
    opt = Adam(pipe.apt_parameters(), lr=cfg.lr_apt)
    rng = np.random.default_rng([cfg.seed, 3])
    starts = batcher.starts("train")
    trace = []
    try:
        for epoch in range(cfg.pretrain_epochs):
            losses = []
            for bi, idx in enumerate(_epoch_batches(starts, cfg.batch_size, rng)):
                _, _, hist, fut = batcher.batch(idx)
                with tn.recording():
                    loss, _ = pretrain_losses(pipe, hist, fut)
                    if not math.isfinite(loss.item()):
                        raise DivergenceError(f"pretraining loss is not finite at epoch {epoch}, batch {bi}")
                    tn.backward(loss)
                opt.step()
                opt.zero_grad()
                losses.append(loss.item())
            trace.append(float(np.mean(losses)) if losses else 0.0)
            logger.info("pretrain epoch %d: loss_apt=%.6f", epoch, trace[-1])
    finally:
        for k, p in frozen.items():
            p.requires_grad = saved[k]
    return trace


def predict(pipe: Pipeline, batcher: Batcher, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    preds, targets = [], []
    with tn.no_grad():
        for i in range(0, len(starts), EVAL_CHUNK):
            x, y, hist, fut = batcher.batch(starts[i:i + EVAL_CHUNK])
            pred, *_ = pipe.forward(x, hist, fut)
            preds.append(pred.data)
            targets.append(y)
    return np.concatenate(preds), np.concatenate(targets)


def error_metrics(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Mean absolute and mean squared error over every window, step and channel."""
    if pred.size == 0:
        raise ValueError("cannot evaluate an empty split")
    diff = pred - target
    return float(np.abs(diff).mean()), float((diff * diff).mean())


def evaluate(pipe: Pipeline, batcher: Batcher, split: str) -> tuple[float, float]:
    starts = batcher.starts(split)
    if len(starts) == 0:
        raise ValueError(f"{split} split has no windows")
    return error_metrics(*predict(pipe, batcher, starts))


def prototype_usage(pipe: Pipeline, batcher: Batcher, split: str = "train") -> np.ndarray:
    """Share of total prototype weight each prototype receives over a split."""
    if pipe.apt is None or pipe.apt.config.no_prototype:
        return np.zeros(0)
    totals = np.zeros(pipe.apt.config.prototypes)
    starts = batcher.starts(split)
    with tn.no_grad():
        for i in range(0, len(starts), EVAL_CHUNK):
            _, _, hist, fut = batcher.batch(starts[i:i + EVAL_CHUNK])
            ctx = aptm.aggregate_context(hist, fut, pipe.apt)
            for w in ctx.weights:
                totals += w.data.sum(axis=0)
    return totals / totals.sum()


def joint_train(pipe: Pipeline, batcher: Batcher, epochs: int | None = None) -> MetricsReport:
    """MSE training of the whole stack with best-validation restore."""
    cfg = pipe.cfg
    epochs = cfg.epochs if epochs is None else epochs
    report = MetricsReport(seed=cfg.seed)
    apt_names = set(pipe.apt_parameters())
    lam = cfg.lam_value
    scale = {k: lam for k in apt_names} if cfg.lambda_mode == "update" else {}
    opt = Adam(pipe.parameters(), lr=cfg.lr_backbone, update_scale=scale)
    rng = np.random.default_rng([cfg.seed, 4])
    starts = batcher.starts("train")
    val_starts = batcher.starts("val")
    best_val, best_state, stale = math.inf, None, 0
    for epoch in range(epochs):
        losses = []
        for bi, idx in enumerate(_epoch_batches(starts, cfg.batch_size, rng)):
            x, y, hist, fut = batcher.batch(idx)
            with tn.recording():
                pred, _, _, state = pipe.forward(x, hist, fut)
                loss = loss_normal(state) + tn.mean(tn.square(pred - Tensor(y)))
                value = loss.item()
                if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                    raise DivergenceError(
                        f"training diverged at epoch {epoch}, batch {bi}: loss={value}; "
                        f"trace so far {report.train_trace}"
                    )
                tn.backward(loss)
            if cfg.lambda_mode == "gradient":
                for k in apt_names:
                    p = opt.params[k]
                    if p.grad is not None:
                        p.grad = p.grad * lam
            opt.step()
            opt.zero_grad()
            losses.append(value)
        report.train_trace.append(float(np.mean(losses)) if losses else 0.0)
        if len(val_starts):
            _, val_mse = error_metrics(*predict(pipe, batcher, val_starts))
        else:
            val_mse = report.train_trace[-1]
        report.val_trace.append(val_mse)
        logger.info("epoch %d: train=%.6f val=%.6f", epoch, report.train_trace[-1], val_mse)
        if val_mse < best_val:
            best_val, best_state, stale = val_mse, pipe.state_arrays(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        pipe.load_arrays(best_state)
    for split in ("train", "val", "test"):
        if len(batcher.starts(split)):
            report.mae[split], report.mse[split] = evaluate(pipe, batcher, split)
    report.gamma_clamps = pipe.apt.gamma_clamps if pipe.apt is not None else 0
    report.sigma_clamps = pipe.sigma_clamps
    report.prototype_usage = [float(u) for u in prototype_usage(pipe, batcher)]
    return report


def load_dataset(cfg: ExperimentConfig) -> SeriesDataset:
    return load_csv(cfg.data, cfg.frequency, cfg.split)


def run_seeded(cfg: ExperimentConfig, ds: SeriesDataset | None = None) -> tuple[MetricsReport, Pipeline]:
    """Build, pretrain (when APT is on) and jointly train one configuration."""
    ds = ds if ds is not None else load_dataset(cfg)
    pipe = Pipeline(cfg, ds.n_channels)
    batcher = Batcher(ds, cfg.L, cfg.H)
    trace = pretrain_apt(pipe, batcher)
    report = joint_train(pipe, batcher)
    report.pretrain_trace = trace
    return report, pipe
