"""Series ingestion, splitting, windowing, calendar features and dataset diagnostics."""

from __future__ import annotations

import csv
import io
import logging
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FREQ_MINUTES = {"ten-minute": 10, "hourly": 60, "daily": 1440}
_FREQ_ALIASES = {
    "10min": "ten-minute", "10t": "ten-minute", "ten_minute": "ten-minute",
    "h": "hourly", "1h": "hourly", "hour": "hourly",
    "d": "daily", "1d": "daily", "day": "daily",
}
LABELS = ("tid", "diw", "dim")
SPLITS = ("train", "val", "test")
_DATE_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d")


class LoadError(ValueError):
    pass


def canonical_freq(freq: str) -> str:
    key = freq.strip().lower()
    key = _FREQ_ALIASES.get(key, key)
    if key not in FREQ_MINUTES:
        raise ValueError(f"unknown frequency {freq!r}; expected one of {sorted(FREQ_MINUTES)}")
    return key


def parse_split(text: str | Sequence[float]) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(":")] if isinstance(text, str) else [float(p) for p in text]
    if len(parts) != 3 or min(parts) < 0 or sum(parts) <= 0:
        raise ValueError(f"split ratios must be three non-negative numbers, got {text!r}")
    total = sum(parts)
    return parts[0] / total, parts[1] / total, parts[2] / total


def tid_cardinality(freq: str) -> int:
    return 1440 // FREQ_MINUTES[canonical_freq(freq)]


@dataclass(frozen=True)
class SeriesDataset:
    values: np.ndarray          # (T, C)
    timestamps: np.ndarray      # datetime64[s], (T,)
    channels: tuple[str, ...]
    frequency: str
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    name: str = "dataset"

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def split_bounds(self) -> dict[str, tuple[int, int]]:
        """Contiguous [start, stop) step ranges for train, val and test."""
        n = self.steps
        n_train = int(n * self.split[0])
        n_val = int(n * self.split[1])
        return {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n),
        }

    def calendar(self) -> dict[str, np.ndarray]:
        """Vectorised tid/diw/dim indices for every step."""
        return calendar_indices(self.timestamps, self.frequency)


@dataclass(frozen=True)
class WindowSample:
    x: np.ndarray               # (L, C)
    y: np.ndarray               # (H, C)
    ts_hist_start: np.datetime64
    ts_future_end: np.datetime64
    start: int


@dataclass(frozen=True)
class TimestampFeature:
    tid: int | None = None
    diw: int | None = None
    dim: int | None = None


# loading --------------------------------------------------------------------

def _parse_date(text: str, lineno: int) -> datetime:
    text = text.strip()
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise LoadError(f"line {lineno}: cannot parse date {text!r}")


def load_csv(
    path: str | os.PathLike,
    frequency: str,
    split_ratios: str | Sequence[float] = (0.7, 0.1, 0.2),
) -> SeriesDataset:
    freq = canonical_freq(frequency)
    split = parse_split(split_ratios)
    path = Path(path)
    stride = np.timedelta64(FREQ_MINUTES[freq], "m")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        if not header or header[0].strip().lower() != "date" or len(header) < 2:
            raise LoadError(f"line 1: header must be 'date,<channel>,...', got {header!r}")
        width = len(header)
        stamps: list[datetime] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise LoadError(f"line {lineno}: expected {width} fields, got {len(row)}")
            stamp = _parse_date(row[0], lineno)
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise LoadError(f"line {lineno}: non-numeric cell") from None
            if not all(np.isfinite(vals)):
                raise LoadError(f"line {lineno}: non-finite cell")
            if stamps:
                step = np.datetime64(stamp, "s") - np.datetime64(stamps[-1], "s")
                if step <= np.timedelta64(0, "s"):
                    raise LoadError(f"line {lineno}: timestamp {row[0]!r} is not increasing")
                if step != stride:
                    raise LoadError(f"line {lineno}: stride {step} does not match frequency {freq}")
            stamps.append(stamp)
            rows.append(vals)
    if not rows:
        raise LoadError(f"{path}: no data rows")
    return SeriesDataset(
        values=np.array(rows, dtype=np.float64),
        timestamps=np.array(stamps, dtype="datetime64[s]"),
        channels=tuple(h.strip() for h in header[1:]),
        frequency=freq,
        split=split,
        name=path.stem,
    )


def write_csv(ds: SeriesDataset, path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    buf.write("date," + ",".join(ds.channels) + "\n")
    for stamp, row in zip(ds.timestamps, ds.values):
        text = str(stamp.astype("datetime64[s]")).replace("T", " ")
        buf.write(text + "," + ",".join(repr(float(v)) for v in row) + "\n")
    out = buf.getvalue()
    if path is not None:
        Path(path).write_text(out, encoding="utf-8")
    return out


# windows ---------------------------------------------------------------------

def window_starts(ds: SeriesDataset, L: int, H: int, split: str) -> np.ndarray:
    """Absolute start offsets of every stride-1 window lying inside ``split``."""
    lo, hi = ds.split_bounds()[split]
    count = (hi - lo) - L - H + 1
    if count <= 0:
        warnings.warn(f"{split} segment of length {hi - lo} is too short for L={L}, H={H}")
        return np.zeros(0, dtype=np.int64)
    return np.arange(lo, lo + count, dtype=np.int64)


def make_windows(ds: SeriesDataset, L: int, H: int, split: str) -> list[WindowSample]:
    out = []
    for s in window_starts(ds, L, H, split):
        s = int(s)
        out.append(WindowSample(
            x=ds.values[s:s + L],
            y=ds.values[s + L:s + L + H],
            ts_hist_start=ds.timestamps[s],
            ts_future_end=ds.timestamps[s + L + H - 1],
            start=s,
        ))
    return out


# calendar features -----------------------------------------------------------

def calendar_indices(stamps: np.ndarray, frequency: str) -> dict[str, np.ndarray]:
    stride = FREQ_MINUTES[canonical_freq(frequency)]
    stamps = np.asarray(stamps, dtype="datetime64[s]")
    days = stamps.astype("datetime64[D]")
    minutes = (stamps - days).astype("timedelta64[m]").astype(np.int64)
    # 1970-01-01 was a Thursday; Monday is 0.
    diw = (days.astype(np.int64) + 3) % 7
    dim = (days - days.astype("datetime64[M]")).astype(np.int64)
    return {"tid": minutes // stride, "diw": diw, "dim": dim}


def timestamp_features(instant, frequency: str, label_set: Iterable[str] = ("tid", "diw")) -> TimestampFeature:
    freq = canonical_freq(frequency)
    labels = {lab.lower() for lab in label_set}
    unknown = labels - set(LABELS)
    if unknown:
        raise ValueError(f"unknown timestamp labels {sorted(unknown)}")
    if freq == "daily":
        labels.discard("tid")
    idx = calendar_indices(np.array([np.datetime64(instant, "s")]), freq)
    return TimestampFeature(**{lab: int(idx[lab][0]) for lab in labels})


# diagnostics -----------------------------------------------------------------

@dataclass
class MissingReport:
    channels: tuple[str, ...]
    zero_fill: np.ndarray
    prev_fill: np.ndarray
    overall_zero: float
    overall_prev: float

    @property
    def per_channel_total(self) -> np.ndarray:
        return self.zero_fill + self.prev_fill

    @property
    def overall(self) -> float:
        return self.overall_zero + self.overall_prev

    @property
    def min_channel(self) -> int:
        return int(np.argmin(self.per_channel_total))

    @property
    def max_channel(self) -> int:
        return int(np.argmax(self.per_channel_total))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "index", "missing_rate", "zero_fill_rate", "prev_fill_rate"])
        for i, name in enumerate(self.channels):
            w.writerow([name, i, f"{self.per_channel_total[i]:.6f}",
                        f"{self.zero_fill[i]:.6f}", f"{self.prev_fill[i]:.6f}"])
        w.writerow(["overall", "", f"{self.overall:.6f}", f"{self.overall_zero:.6f}", f"{self.overall_prev:.6f}"])
        w.writerow(["min", self.min_channel, f"{self.per_channel_total[self.min_channel]:.6f}", "", ""])
        w.writerow(["max", self.max_channel, f"{self.per_channel_total[self.max_channel]:.6f}", "", ""])
        return buf.getvalue()


def missing_rate_report(
    ds: SeriesDataset,
    zero_values: Sequence[float] = (0.0,),
    exclude_zero_channels: Sequence[str] = (),
) -> MissingReport:
    """Zero-fill and previous-value-fill rates per channel and overall.

    Zero-fill counts cells equal to any of ``zero_values`` over all cells;
    previous-value-fill counts cells equal to their predecessor over the
    ``T - 1`` transitions.  Channels in ``exclude_zero_channels`` report a
    zero-fill rate of 0 (genuine zeros such as precipitation).
    """
    v = ds.values
    T = v.shape[0]
    if T < 2:
        raise ValueError("missing_rate_report needs at least two steps")
    zeros = np.isin(v, np.asarray(zero_values, dtype=np.float64))
    excluded = [ds.channels.index(c) for c in exclude_zero_channels if c in ds.channels]
    zeros[:, excluded] = False
    repeats = v[1:] == v[:-1]
    return MissingReport(
        channels=ds.channels,
        zero_fill=zeros.mean(axis=0),
        prev_fill=repeats.mean(axis=0),
        overall_zero=float(zeros.mean()),
        overall_prev=float(repeats.mean()),
    )


def js_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Jensen-Shannon divergence (natural log) along the last axis."""
    p, q = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(q, dtype=float))
    m = 0.5 * (p + q)

    def kl(a):
        # 0 * log 0 = 0
        ratio = np.divide(a, m, out=np.ones_like(a), where=a > 0)
        return (a * np.log(ratio)).sum(-1)

    return 0.5 * kl(p) + 0.5 * kl(q)


def histogram_distributions(samples: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Row-wise smoothed histograms over a shared range; rows sum to 1."""
    if hi <= lo:
        hi = lo + 1.0
    pos = np.clip(((samples - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    counts = np.zeros((samples.shape[0], bins))
    np.add.at(counts, (np.repeat(np.arange(samples.shape[0]), samples.shape[1]), pos.reshape(-1)), 1.0)
    counts += 1e-12
    return counts / counts.sum(axis=1, keepdims=True)


@dataclass
class JSReport:
    label: str
    within_mean: float
    cross_mean: float
    per_channel: list[tuple[str, float, float]] = field(default_factory=list)
    groups: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "label", "within_label_js", "cross_label_js"])
        for name, within, cross in self.per_channel:
            w.writerow([name, self.label, f"{within:.6f}", f"{cross:.6f}"])
        w.writerow(["mean", self.label, f"{self.within_mean:.6f}", f"{self.cross_mean:.6f}"])
        return buf.getvalue()


def js_divergence_report(ds: SeriesDataset, label: str = "diw", bins: int = 32) -> JSReport:
    """Mean JS divergence between day-length subseries sharing a label vs. not.

    Each complete calendar day is one subseries, labelled by its day-in-week
    (or day-in-month).  Histograms per channel share that channel's pooled
    value range.
    """
    label = label.lower()
    if label not in ("diw", "dim"):
        raise ValueError("day-length subseries can only be labelled by 'diw' or 'dim'")
    if bins < 8:
        raise ValueError("bins must be >= 8")
    if ds.frequency == "daily":
        raise ValueError("day-length subseries need an intraday frequency")
    per_day = tid_cardinality(ds.frequency)
    days = ds.timestamps.astype("datetime64[D]")
    uniq, first, counts = np.unique(days, return_index=True, return_counts=True)
    keep = counts == per_day
    starts = first[keep]
    labels = calendar_indices(uniq[keep].astype("datetime64[s]"), "daily")[label]

    valid = np.zeros(len(labels), dtype=bool)
    for lab in np.unique(labels):
        members = labels == lab
        if members.sum() < 2:
            warnings.warn(f"label group {lab} has fewer than two subseries; skipped")
        else:
            valid |= members
    starts, labels = starts[valid], labels[valid]
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two label groups with two subseries each")

    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same), k=1)
    within_mask, cross_mask = same & upper, ~same & upper
    idx = starts[:, None] + np.arange(per_day)[None, :]
    per_channel = []
    for c, name in enumerate(ds.channels):
        seg = ds.values[idx, c]
        dist = histogram_distributions(seg, float(seg.min()), float(seg.max()), bins)
        js = np.stack([js_divergence(dist[i][None, :], dist) for i in range(len(dist))])
        per_channel.append((name, float(js[within_mask].mean()), float(js[cross_mask].mean())))
    return JSReport(
        label=label,
        within_mean=float(np.mean([p[1] for p in per_channel])),
        cross_mean=float(np.mean([p[2] for p in per_channel])),
        per_channel=per_channel,
        groups=len(np.unique(labels)),
    )


# synthetic data ----------------------------------------------------------------

# (amplitude, mean) per weekday, Monday first.
WEEKDAY_SHAPES = (
    (0.5, -1.0),
    (1.75, 0.5),
    (1.0, -0.5),
    (2.0, 1.0),
    (0.75, 0.0),
    (1.5, -0.75),
    (1.25, 0.75),
)


def synthesize(
    days: int,
    frequency: str = "hourly",
    channels: int = 1,
    seed: int = 0,
    noise: float = 0.05,
    start: str = "2024-01-01 00:00:00",
    split: str | Sequence[float] = (0.7, 0.1, 0.2),
) -> SeriesDataset:
    """Daily sinusoid whose amplitude and level depend only on the weekday."""
    freq = canonical_freq(frequency)
    if freq == "daily":
        raise ValueError("synthetic generator needs an intraday frequency")
    per_day = tid_cardinality(freq)
    T = days * per_day
    stamps = np.datetime64(start, "s") + np.arange(T) * np.timedelta64(FREQ_MINUTES[freq], "m")
    cal = calendar_indices(stamps, freq)
    amp = np.array([a for a, _ in WEEKDAY_SHAPES])[cal["diw"]]
    level = np.array([m for _, m in WEEKDAY_SHAPES])[cal["diw"]]
    base = amp * np.sin(2.0 * np.pi * cal["tid"] / per_day) + level
    rng = np.random.default_rng(seed)
    values = base[:, None] + noise * rng.standard_normal((T, channels))
    return SeriesDataset(
        values=values,
        timestamps=stamps,
        channels=tuple(f"ch{c}" for c in range(channels)),
        frequency=freq,
        split=parse_split(split),
        name="synthetic",
    )
