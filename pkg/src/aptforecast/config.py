"""Experiment configuration: ``key = value`` text files with ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .apt import FREQ_DEFAULTS, APTConfig
from .data import canonical_freq, parse_split


class ConfigError(ValueError):
    pass


DEFAULT_PERIOD = {"ten-minute": 144, "hourly": 24, "daily": 7}


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = ""
    frequency: str = "hourly"
    split: str = "7:1:2"
    L: int = 96
    H: int = 24
    backbone: str = "linear"
    period: int = 0                      # 0 -> frequency default
    norm: str = "revin"
    revin_affine: bool = False
    apt: bool = True
    embed_dim: int = 20
    hidden: int = 32
    prototypes: int = 0                  # 0 -> frequency default
    top_k: int = 0                       # 0 -> frequency default
    labels: tuple[str, ...] = ("tid", "diw")
    channel_identity: bool = False
    per_channel_affine: bool = False
    wo_topk: bool = False
    wo_prototype: bool = False
    wo_deapt: bool = False
    wo_gamma: bool = False
    wo_beta: bool = False
    wo_orth: bool = False
    wo_balance: bool = False
    wo_reg: bool = False
    lr_backbone: float = 2e-3
    lr_apt: float = 5e-5
    lam: float = 0.0                     # 0 -> lr_apt / lr_backbone
    lambda_mode: str = "update"          # update | gradient
    pretrain_epochs: int = 3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 1
    patience: int = 5
    neutral_init: bool = False
    exclude_zero_channels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "frequency", canonical_freq(self.frequency))
        parse_split(self.split)
        if self.backbone not in ("linear", "sparsetsf"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.norm not in ("none", "revin"):
            raise ConfigError(f"unknown normalization {self.norm!r}")
        if self.lambda_mode not in ("update", "gradient"):
            raise ConfigError(f"lambda_mode must be 'update' or 'gradient', got {self.lambda_mode!r}")
        if self.L < 2 or self.H < 1:
            raise ConfigError("need L >= 2 and H >= 1")
        if self.lr_backbone <= 0 or self.lr_apt <= 0 or self.lam < 0:
            raise ConfigError("learning rates must be positive and lambda non-negative")
        if self.pretrain_epochs < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.backbone == "sparsetsf" and (self.L % self.resolved_period or self.H % self.resolved_period):
            raise ConfigError(f"period {self.resolved_period} must divide L={self.L} and H={self.H}")

    @property
    def resolved_period(self) -> int:
        return self.period or DEFAULT_PERIOD[self.frequency]

    @property
    def lam_value(self) -> float:
        return self.lam or self.lr_apt / self.lr_backbone

    @property
    def dataset_name(self) -> str:
        return Path(self.data).stem if self.data else "dataset"

    def apt_config(self, channels: int) -> APTConfig:
        n, k = FREQ_DEFAULTS[self.frequency]
        labels = self.labels if self.frequency != "daily" else tuple(l for l in self.labels if l != "tid")
        return APTConfig(
            frequency=self.frequency,
            channels=channels,
            embed_dim=self.embed_dim,
            hidden=self.hidden,
            prototypes=self.prototypes or n,
            top_k=self.top_k or k,
            labels=labels or ("diw",),
            channel_identity=self.channel_identity,
            per_channel_affine=self.per_channel_affine,
            no_topk=self.wo_topk,
            no_prototype=self.wo_prototype,
            no_deapt=self.wo_deapt,
            no_gamma=self.wo_gamma,
            no_beta=self.wo_beta,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, tuple):
                text = ",".join(v)
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_ALIASES = {"lambda": "lam", "freq": "frequency", "l": "L", "h": "H", "lr": "lr_backbone"}


def _coerce(name: str, raw: str, kind) -> Any:
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        if "tuple" in str(kind):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot interpret {raw!r} as {kind}") from None


def _field_types() -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def coerce_values(values: Mapping[str, str]) -> dict[str, Any]:
    types = _field_types()
    out = {}
    for key, raw in values.items():
        name = _ALIASES.get(key.strip().lower(), key.strip())
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = raw if not isinstance(raw, str) else _coerce(name, raw, types[name])
    return out


def parse_config(text: str) -> dict[str, Any]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    return coerce_values(raw)


def load_config(path: str | os.PathLike, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    values = parse_config(path.read_text(encoding="utf-8"))
    if "data" in values and values["data"] and not Path(values["data"]).is_absolute():
        values["data"] = str((path.parent / values["data"]))
    values.update(overrides or {})
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
