"""Dataset ingestion, causal preprocessing, splits, windows and synthetic fixtures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InsufficientDataError, ParseError, SpecError, UnfillableError


@dataclass(frozen=True)
class Dataset:
    channel_names: tuple
    values: np.ndarray  # T x C
    labels: Optional[np.ndarray] = None  # T, {0, 1}
    sample_period: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"values must be T x C, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if len(self.channel_names) != values.shape[1]:
            raise ValueError("channel_names length must equal the number of columns")
        if self.labels is not None:
            labels = np.asarray(self.labels).astype(np.int8)
            if labels.shape != (values.shape[0],):
                raise ValueError("labels must have length T")
            object.__setattr__(self, "labels", labels)
        values.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "Dataset":
        labels = None if self.labels is None else self.labels[start:stop]
        return replace(self, values=self.values[start:stop].copy(), labels=labels)


@dataclass(frozen=True)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray


@dataclass(frozen=True)
class WindowView:
    start: int
    length: int

    @property
    def target(self) -> int:
        return self.start + self.length - 1


def load_csv(path, label_column: Optional[str] = "label") -> Dataset:
    """Read a headed numeric CSV. Blank cells become NaN.

    If ``label_column`` is present in the header it is split off as labels;
    its absence is not an error.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise FormatError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if all(_is_number(h) for h in header if h):
            raise FormatError(f"{path}: first row looks numeric; a header row is required")
        label_idx = header.index(label_column) if label_column in header else None
        names = [h for i, h in enumerate(header) if i != label_idx]
        rows, labels = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}", row=r)
            vals = []
            for c, cell in enumerate(row):
                cell = cell.strip()
                if c == label_idx:
                    try:
                        labels.append(int(float(cell)))
                    except ValueError:
                        raise ParseError(f"{path}: bad label {cell!r} at row {r}", row=r, col=c) from None
                    continue
                if cell == "":
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell {cell!r} at row {r}, column {header[c]!r}", row=r, col=c
                    ) from None
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return Dataset(names, values, np.array(labels) if label_idx is not None else None)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def write_csv(path, ds: Dataset, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = list(ds.channel_names) + ([label_column] if ds.labels is not None else [])
        w.writerow(header)
        for t in range(ds.n_steps):
            row = ["" if math.isnan(v) else repr(float(v)) for v in ds.values[t]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[t])))
            w.writerow(row)


def forward_fill(ds: Dataset) -> Dataset:
    values = ds.values.copy()
    nan = np.isnan(values)
    if not nan.any():
        return ds
    lead = np.flatnonzero(nan[0])
    if lead.size:
        raise UnfillableError(ds.channel_names[lead[0]])
    idx = np.where(nan, 0, np.arange(values.shape[0])[:, None])
    np.maximum.accumulate(idx, axis=0, out=idx)
    values = values[idx, np.arange(values.shape[1])[None, :]]
    return replace(ds, values=values)


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Block means of ``factor`` consecutive rows; a block is anomalous if any member is."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor > ds.n_steps:
        raise ValueError(f"factor {factor} exceeds series length {ds.n_steps}")
    if factor == 1:
        return ds
    n = ds.n_steps // factor
    values = ds.values[: n * factor].reshape(n, factor, ds.n_channels).mean(axis=1)
    labels = None
    if ds.labels is not None:
        labels = ds.labels[: n * factor].reshape(n, factor).max(axis=1)
    period = None if ds.sample_period is None else ds.sample_period * factor
    return Dataset(ds.channel_names, values, labels, period)


def moving_average(ds: Dataset, window: int) -> Dataset:
    """Trailing mean over the last ``min(window, t + 1)`` samples."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return ds
    x = ds.values
    csum = np.cumsum(x, axis=0)
    out = csum.copy()
    out[window:] = csum[window:] - csum[:-window]
    counts = np.minimum(np.arange(1, x.shape[0] + 1), window).astype(np.float64)
    return replace(ds, values=out / counts[:, None])


def fit_minmax(train: Dataset) -> NormalizationStats:
    return NormalizationStats(np.nanmin(train.values, axis=0), np.nanmax(train.values, axis=0))


def apply_minmax(ds: Dataset, stats: NormalizationStats, clip: Optional[Sequence[float]] = None) -> Dataset:
    span = stats.maximum - stats.minimum
    constant = span == 0
    safe = np.where(constant, 1.0, span)
    values = (ds.values - stats.minimum) / safe
    values[:, constant] = 0.0
    if clip is not None:
        lo, hi = clip
        values = np.clip(values, lo, hi)
    return replace(ds, values=values)


def zero_channels(ds: Dataset, names: Sequence[str]) -> Dataset:
    if not names:
        return ds
    idx = [_channel_index(ds, n) for n in names]
    values = ds.values.copy()
    values[:, idx] = 0.0
    return replace(ds, values=values)


def drop_channels(ds: Dataset, names: Sequence[str]) -> Dataset:
    if not names:
        return ds
    drop = {_channel_index(ds, n) for n in names}
    keep = [i for i in range(ds.n_channels) if i not in drop]
    return Dataset([ds.channel_names[i] for i in keep], ds.values[:, keep], ds.labels, ds.sample_period)


def _channel_index(ds, name):
    try:
        return ds.channel_names.index(name)
    except ValueError:
        raise SpecError(f"unknown channel {name!r}") from None


def split_train_val(train: Dataset, val_fraction: float = 0.2, window: int = 1):
    """Temporal split: the last ``val_fraction`` of the rows become validation."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    n_val = int(round(train.n_steps * val_fraction))
    n_fit = train.n_steps - n_val
    if min(n_val, n_fit) < max(window, 1):
        raise InsufficientDataError(
            f"split of {train.n_steps} rows gives {n_fit}/{n_val}, need at least {window} each"
        )
    return train.slice(0, n_fit), train.slice(n_fit, train.n_steps)


def windows(values: np.ndarray, length: int) -> np.ndarray:
    """All stride-1 look-back windows, shape ``(T - L + 1, L, C)``; a read-only view."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < length:
        raise InsufficientDataError(f"series of length {values.shape[0]} is shorter than window {length}")
    view = np.lib.stride_tricks.sliding_window_view(values, length, axis=0)
    return view.transpose(0, 2, 1)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class AnomalySegment:
    start: int
    end: int  # exclusive
    kind: str = "mean_shift"  # or "variance_burst"
    magnitude: float = 1.0
    channels: Optional[tuple] = None  # indices; default picked from the seed


@dataclass(frozen=True)
class SynthSpec:
    block_sizes: tuple = (3, 3)
    length: int = 2000
    anomaly_segments: tuple = ()
    seed: int = 0
    n_constant: int = 0
    ar_coef: float = 0.9
    noise_scale: float = 0.3
    latent_scale: float = 1.0
    period_range: tuple = (20.0, 80.0)

    @property
    def n_channels(self) -> int:
        return sum(self.block_sizes) + self.n_constant


def _ar1(rng, n, coef, size):
    e = rng.standard_normal((n, size)) * math.sqrt(1.0 - coef * coef)
    out = np.empty_like(e)
    out[0] = rng.standard_normal(size)
    for t in range(1, n):
        out[t] = coef * out[t - 1] + e[t]
    return out


def synth_generate(spec: SynthSpec) -> Dataset:
    """Channels built as a per-block latent (sinusoid + AR(1)) plus AR(1) noise.

    Each block shares one latent, so within-block correlation is high and
    cross-block correlation is near zero. Anomaly segments add a mean shift
    or scale up the noise (variance burst) on a subset of channels and set
    their labels to 1.
    """
    if any(s < 1 for s in spec.block_sizes) or not spec.block_sizes:
        raise SpecError("block sizes must be positive")
    segs = sorted(spec.anomaly_segments, key=lambda s: s.start)
    for seg in segs:
        if not 0 <= seg.start < seg.end <= spec.length:
            raise SpecError(f"segment [{seg.start}, {seg.end}) outside series of length {spec.length}")
        if seg.kind not in ("mean_shift", "variance_burst"):
            raise SpecError(f"unknown anomaly kind {seg.kind!r}")
    for a, b in zip(segs, segs[1:]):
        if b.start < a.end:
            raise SpecError(f"anomaly segments [{a.start},{a.end}) and [{b.start},{b.end}) overlap")

    rng = np.random.default_rng(spec.seed)
    n = spec.length
    t = np.arange(n)
    cols, names = [], []
    for b, size in enumerate(spec.block_sizes):
        period = rng.uniform(*spec.period_range)
        phase = rng.uniform(0, 2 * np.pi)
        latent = np.sin(2 * np.pi * t / period + phase) + 0.5 * _ar1(rng, n, spec.ar_coef, 1)[:, 0]
        loadings = rng.uniform(0.7, 1.3, size) * rng.choice([-1.0, 1.0], size)
        offsets = rng.uniform(-1.0, 1.0, size)
        noise = _ar1(rng, n, 0.5, size) * spec.noise_scale
        block = spec.latent_scale * latent[:, None] * loadings[None, :] + offsets + noise
        cols.append(block)
        names += [f"b{b}_c{i}" for i in range(size)]
    for i in range(spec.n_constant):
        cols.append(np.full((n, 1), rng.uniform(-1, 1)))
        names.append(f"const{i}")
    values = np.concatenate(cols, axis=1)
    labels = np.zeros(n, dtype=np.int8)

    n_active = sum(spec.block_sizes)
    for seg in segs:
        if seg.channels is None:
            k = max(1, n_active // 4)
            chans = np.sort(rng.choice(n_active, size=k, replace=False))
        else:
            chans = np.asarray(seg.channels, dtype=int)
        sl = slice(seg.start, seg.end)
        std = values[:, chans].std(axis=0)
        if seg.kind == "mean_shift":
            values[sl, chans] += seg.magnitude * std
        else:
            burst = rng.standard_normal((seg.end - seg.start, chans.size))
            values[sl, chans] += seg.magnitude * std * burst
        labels[sl] = 1
    return Dataset(names, values, labels)
