"""Dataset ingestion, chronological splits, standardization and windowing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .seeding import stream

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SYNTH_KINDS = ("sine_mixture", "trend_plus_season", "ar_noise")


class DataFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeriesDataset:
    name: str
    values: np.ndarray  # (T_total, V), raw scale
    split_boundaries: tuple[int, int] | None = None  # (train_end, val_end)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    warnings: tuple[str, ...] = ()
    # samples per day, needed only by the month-wise ETT schemes
    samples_per_day: int | None = None

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataFormatError(f"values must be 2-d (T, V), got shape {self.values.shape}")
        self.values.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def split_range(self, split: str) -> tuple[int, int]:
        if self.split_boundaries is None:
            raise ConfigError("dataset has not been split")
        train_end, val_end = self.split_boundaries
        return {
            "train": (0, train_end),
            "val": (train_end, val_end),
            "test": (val_end, self.n_steps),
        }[split]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass(frozen=True)
class WindowSet:
    inputs: np.ndarray  # (N, t_in, V)
    targets: np.ndarray  # (N, t_out, V)
    origin_indices: np.ndarray  # absolute index of each window's first input step
    split: str = "train"

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.inputs[idx], self.targets[idx], self.origin_indices[idx], self.split)

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.subset(np.arange(start, min(start + batch_size, len(self))))


# ---------------------------------------------------------------------------
# CSV


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, has_time_column: bool = False) -> TimeSeriesDataset:
    """Read a numeric CSV. A non-numeric first row is taken as a header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    first = rows[0][1:] if has_time_column else rows[0]
    if not all(_is_number(c) for c in first):
        rows = rows[1:]
    if len(rows) < 2:
        raise DataFormatError(f"{path}: need at least 2 data rows, found {len(rows)}")
    width = len(rows[0])
    out = []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataFormatError(f"{path}: ragged row {i + 1}: {len(row)} cells, expected {width}")
        cells = row[1:] if has_time_column else row
        vals = []
        for j, c in enumerate(cells):
            try:
                vals.append(float(c))
            except ValueError:
                col = j + (1 if has_time_column else 0)
                raise DataFormatError(f"{path}: non-numeric cell {c!r} at row {i + 1}, column {col + 1}") from None
        out.append(vals)
    values = np.asarray(out, dtype=np.float64)
    if values.shape[1] == 0:
        raise DataFormatError(f"{path}: no value columns")
    return TimeSeriesDataset(name=path.stem, values=values)


# ---------------------------------------------------------------------------
# splitting


def _boundaries(n: int, scheme: str, train_frac=None, val_frac=None, samples_per_day=None):
    if scheme == "ratio_7_1_2":
        train_end = int(n * 0.7)
        test_len = int(n * 0.2)
        return train_end, n - test_len, n
    if scheme == "custom":
        if train_frac is None or val_frac is None:
            raise ConfigError("custom split needs train_frac and val_frac")
        if not (0 < train_frac and 0 <= val_frac and train_frac + val_frac < 1):
            raise ConfigError(f"invalid split fractions {train_frac}, {val_frac}")
        train_end = int(n * train_frac)
        val_end = int(n * (train_frac + val_frac))
        return train_end, val_end, n
    if scheme in ("ett_8_4_4_months", "ett_12_4_4_months"):
        if not samples_per_day:
            raise ConfigError(f"{scheme} needs the sampling interval (samples_per_day)")
        month = 30 * samples_per_day
        train_months = 8 if scheme == "ett_8_4_4_months" else 12
        train_end = train_months * month
        val_end = train_end + 4 * month
        end = val_end + 4 * month
        if end > n:
            raise ConfigError(f"{scheme} needs {end} steps, dataset has {n}")
        return train_end, val_end, end
    raise ConfigError(f"unknown split scheme {scheme!r}")


def split_chronological(
    ds: TimeSeriesDataset,
    scheme: str = "ratio_7_1_2",
    train_frac: float | None = None,
    val_frac: float | None = None,
    samples_per_day: int | None = None,
) -> TimeSeriesDataset:
    """Set split boundaries and compute train-only per-channel statistics.

    The month-wise ETT schemes use 30-day months from the first row and drop
    rows after the test block.
    """
    spd = samples_per_day or ds.samples_per_day
    train_end, val_end, end = _boundaries(ds.n_steps, scheme, train_frac, val_frac, spd)
    if not (0 < train_end < val_end < end):
        raise ConfigError(
            f"split {scheme} of {ds.n_steps} steps leaves an empty split: "
            f"train=[0,{train_end}) val=[{train_end},{val_end}) test=[{val_end},{end})"
        )
    values = ds.values if end == ds.n_steps else ds.values[:end].copy()
    train = values[:train_end]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    warnings = list(ds.warnings)
    degenerate = std <= 1e-12
    for v in np.flatnonzero(degenerate):
        msg = f"channel {v} is constant on the train split; std clamped to 1"
        log.warning(msg)
        warnings.append(msg)
    std = np.where(degenerate, 1.0, std)
    return replace(
        ds,
        values=values,
        split_boundaries=(train_end, val_end),
        mean=mean,
        std=std,
        warnings=tuple(warnings),
        samples_per_day=spd,
    )


def make_windows(
    ds: TimeSeriesDataset, split: str, t_in: int, t_out: int, window_stride: int = 1
) -> WindowSet:
    """Sliding windows fully inside one split, standardized with train stats."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    if window_stride < 1:
        raise ConfigError("window_stride must be >= 1")
    lo, hi = ds.split_range(split)
    need = t_in + t_out
    if hi - lo < need:
        raise ConfigError(f"{split} split has {hi - lo} steps; t_in + t_out requires {need}")
    z = ds.standardize(ds.values[lo:hi])
    starts = np.arange(0, hi - lo - need + 1, window_stride)
    # strided views, then copy so windows own their memory
    view = np.lib.stride_tricks.sliding_window_view(z, need, axis=0)  # (n, V, need)
    sel = view[starts].transpose(0, 2, 1)
    inputs = np.ascontiguousarray(sel[:, :t_in])
    targets = np.ascontiguousarray(sel[:, t_in:])
    return WindowSet(inputs, targets, starts + lo, split)


# ---------------------------------------------------------------------------
# synthetic data

# irrational multipliers keep component periods incommensurate
_IRRATIONALS = (1.0, math.sqrt(2), math.sqrt(3), math.sqrt(5), math.pi / 2, math.e / 2)


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "sine_mixture"
    channels: int = 3
    length: int = 4096
    seed: int = 0
    noise: float = 0.0
    base_period: float = 24.0
    extra: dict = field(default_factory=dict)


def synth_generate(spec: SynthSpec) -> TimeSeriesDataset:
    if spec.kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {spec.kind!r}")
    if spec.length < 512:
        raise ConfigError("synthetic length must be >= 512")
    if spec.channels < 1:
        raise ConfigError("synthetic channels must be >= 1")
    rng = stream(spec.seed, f"synth:{spec.kind}")
    t = np.arange(spec.length, dtype=np.float64)
    out = np.empty((spec.length, spec.channels))
    for v in range(spec.channels):
        if spec.kind == "sine_mixture":
            n_comp = int(rng.integers(2, 5))
            mults = rng.choice(len(_IRRATIONALS), size=n_comp, replace=False)
            sig = np.zeros_like(t)
            for m in mults:
                period = spec.base_period * _IRRATIONALS[m] * rng.uniform(0.8, 1.6)
                amp = rng.uniform(0.5, 1.5)
                phase = rng.uniform(0, 2 * np.pi)
                sig += amp * np.sin(2 * np.pi * t / period + phase)
        elif spec.kind == "trend_plus_season":
            slope = rng.normal(0, 1.0 / spec.length)
            period = spec.base_period * rng.uniform(0.8, 1.6)
            sig = slope * t + rng.uniform(0.5, 1.5) * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
        else:
            phi = rng.uniform(0.5, 0.95)
            e = rng.normal(0, 1, size=spec.length)
            sig = np.empty_like(t)
            sig[0] = e[0]
            for i in range(1, spec.length):
                sig[i] = phi * sig[i - 1] + e[i]
        if spec.noise > 0:
            sig = sig + rng.normal(0, spec.noise, size=spec.length)
        out[:, v] = sig
    return TimeSeriesDataset(name=f"synth_{spec.kind}_s{spec.seed}", values=out)
