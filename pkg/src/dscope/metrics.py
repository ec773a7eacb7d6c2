"""Forecast accuracy: MAE, MSE and MAPE."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import TimeSeriesDataset, WindowSet
from .model import ForecastModel, predict


@dataclass(frozen=True)
class EvalResult:
    mae: float
    mse: float
    mape: float | None
    scale: str
    n_windows: int
    mape_skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def error_metrics(pred: np.ndarray, target: np.ndarray, scale: str = "standardized") -> EvalResult:
    """Per-window means over (t_out, V), then mean over windows.

    MAPE (percent) ignores entries whose target is exactly zero and reports
    how many were skipped; it is None when every target is zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.shape[0] == 0:
        raise ValueError("no windows to evaluate")
    err = pred - target
    n = err.shape[0]
    flat = err.reshape(n, -1)
    mae = float(np.abs(flat).mean(axis=1).mean())
    mse = float((flat * flat).mean(axis=1).mean())
    nz = target != 0
    skipped = int((~nz).sum())
    mape = float(100.0 * np.abs(err[nz] / target[nz]).mean()) if nz.any() else None
    return EvalResult(mae, mse, mape, scale, n, skipped)


def evaluate(
    model: ForecastModel,
    windows: WindowSet,
    scale: str = "standardized",
    dataset: TimeSeriesDataset | None = None,
) -> EvalResult:
    if len(windows) == 0:
        raise ValueError("no windows to evaluate")
    pred = predict(model, windows.inputs)
    target = windows.targets
    if scale == "raw":
        if dataset is None:
            raise ValueError("raw-scale evaluation needs the dataset statistics")
        pred, target = dataset.destandardize(pred), dataset.destandardize(target)
    elif scale != "standardized":
        raise ValueError(f"unknown scale {scale!r}")
    return error_metrics(pred, target, scale)
