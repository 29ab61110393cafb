"""Multichannel series container, CSV ingestion, synthetic data, windowing and metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "DataError",
    "MultiSeries",
    "WindowBatch",
    "SplitSpec",
    "MomentSummary",
    "GeneratorParams",
    "ingest_csv",
    "split_bounds",
    "split_values",
    "make_windows",
    "synth_heavy_tailed",
    "mse",
    "mae",
    "moments",
]


class DataError(ValueError):
    """Raised for malformed input data (bad files, bad shapes, short splits)."""


@dataclass(frozen=True)
class MultiSeries:
    values: np.ndarray
    channel_names: tuple
    timestamps: Optional[tuple] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError(f"values must be a non-empty (L, C) array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("values contain NaN or Inf")
        names = tuple(str(n) for n in self.channel_names)
        if len(names) != values.shape[1]:
            raise DataError(f"expected {values.shape[1]} channel names, got {len(names)}")
        if len(set(names)) != len(names):
            raise DataError("channel names must be distinct")
        if self.timestamps is not None and len(self.timestamps) != values.shape[0]:
            raise DataError("timestamps length does not match number of rows")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", names)
        if self.timestamps is not None:
            object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowBatch:
    lookbacks: np.ndarray  # (N, T, C)
    horizons: np.ndarray  # (N, H, C)

    @property
    def T(self) -> int:
        return self.lookbacks.shape[1]

    @property
    def H(self) -> int:
        return self.horizons.shape[1]

    @property
    def n(self) -> int:
        return self.lookbacks.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.lookbacks[idx], self.horizons[idx])


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not (0.0 < f < 1.0) for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True)
class MomentSummary:
    mean: float
    variance: float
    skewness: Optional[float]
    kurtosis: Optional[float]


def ingest_csv(path: Union[str, Path], timestamp_column: Optional[str] = "date") -> MultiSeries:
    """Read a header-first, comma-delimited CSV into a :class:`MultiSeries`.

    The timestamp column (if present in the header) is kept as opaque strings;
    every other column must parse as a finite float. Row numbers in error
    messages are 1-based data rows, i.e. excluding the header.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if len(body) < 2:
        raise DataError(f"{path}: fewer than 2 rows")

    ts_idx = header.index(timestamp_column) if timestamp_column in header else None
    value_cols = [i for i in range(len(header)) if i != ts_idx]
    if not value_cols:
        raise DataError(f"{path}: no value columns")

    values = np.empty((len(body), len(value_cols)))
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for j, col in enumerate(value_cols):
            cell = row[col].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {header[col]}: non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {r}, column {header[col]}: non-finite value {cell!r}")
            values[r - 1, j] = v

    timestamps = tuple(row[ts_idx] for row in body) if ts_idx is not None else None
    return MultiSeries(values, tuple(header[c] for c in value_cols), timestamps)


def split_bounds(length: int, split: SplitSpec) -> dict:
    """Chronological [start, stop) index ranges of the three parts."""
    n_train = int(round(length * split.train_frac))
    n_val = int(round(length * split.val_frac))
    return {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, length),
    }


def split_values(series: MultiSeries, split: SplitSpec, part: str) -> np.ndarray:
    try:
        start, stop = split_bounds(series.length, split)[part]
    except KeyError:
        raise ValueError(f"unknown split part {part!r}") from None
    return series.values[start:stop]


def make_windows(series: MultiSeries, split: SplitSpec, part: str, T: int, H: int) -> WindowBatch:
    """Stride-1 (lookback, horizon) pairs from one chronological split."""
    if T < 1 or H < 1:
        raise ValueError("T and H must be positive")
    values = split_values(series, split, part)
    length = values.shape[0]
    if length < T + H:
        raise DataError(f"{part} split has {length} steps, need at least T + H = {T + H}")
    n = length - T - H + 1
    view = np.lib.stride_tricks.sliding_window_view(values, T + H, axis=0)  # (n, C, T+H)
    view = np.moveaxis(view[:n], 2, 1)
    return WindowBatch(np.ascontiguousarray(view[:, :T]), np.ascontiguousarray(view[:, T:]))


@dataclass(frozen=True)
class GeneratorParams:
    """Settings for :func:`synth_heavy_tailed`.

    Shape/location/scale entries may be scalars (shared by every channel) or
    sequences with one value per channel.
    """

    delta: Union[float, Sequence[float]] = 1.0
    epsilon: Union[float, Sequence[float]] = 0.0
    loc: Union[float, Sequence[float]] = 0.0
    scale: Union[float, Sequence[float]] = 1.0
    trend: float = 0.0
    season_amplitude: float = 0.0
    season_period: float = 24.0


def _per_channel(value, C: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        return np.full(C, arr[0])
    if arr.size != C:
        raise ValueError(f"{name} needs 1 or {C} entries, got {arr.size}")
    return arr


def synth_heavy_tailed(seed: int, L: int, C: int, params: GeneratorParams = GeneratorParams()) -> MultiSeries:
    """Trend + seasonality + Johnson S_U noise, deterministic in all arguments.

    The noise for channel ``c`` is ``loc + scale * sinh((Z - epsilon) / delta)``
    with ``Z`` standard normal, so its shape parameters are known exactly.
    """
    if L < 1 or C < 1:
        raise ValueError("L and C must be positive")
    delta = _per_channel(params.delta, C, "delta")
    epsilon = _per_channel(params.epsilon, C, "epsilon")
    loc = _per_channel(params.loc, C, "loc")
    scale = _per_channel(params.scale, C, "scale")
    if np.any(delta <= 0) or np.any(scale <= 0):
        raise ValueError("generator delta and scale must be positive")

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((L, C))
    noise = loc + scale * np.sinh((z - epsilon) / delta)
    t = np.arange(L, dtype=np.float64)[:, None]
    phase = 2.0 * np.pi * np.arange(C) / C
    signal = params.trend * t / max(L, 1) + params.season_amplitude * np.sin(
        2.0 * np.pi * t / params.season_period + phase
    )
    names = tuple(f"ch{c}" for c in range(C))
    return MultiSeries(signal + noise, names)


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def moments(sample) -> MomentSummary:
    """Population central moments; kurtosis is the raw fourth standardized moment."""
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("moments need at least 2 values")
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d**2))
    if m2 == 0.0:
        return MomentSummary(mean, 0.0, None, None)
    if m2 < 1e-100:
        # tiny m2: standardize first so the powers do not underflow
        u = d / np.sqrt(m2)
        return MomentSummary(mean, m2, float(np.mean(u**3)), float(np.mean(u**4)))
    m3 = float(np.mean(d**3))
    m4 = float(np.mean(d**4))
    return MomentSummary(mean, m2, m3 / m2**1.5, m4 / m2**2)
