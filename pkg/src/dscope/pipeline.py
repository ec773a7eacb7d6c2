"""End-to-end steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .analysis import ImportanceConfig, ImportanceReport, collect_trace
from .config import RunConfig
from .data import TimeSeriesDataset, WindowSet, load_csv, make_windows, split_chronological, synth_generate
from .metrics import EvalResult, evaluate
from .model import ForecastModel, count_parameters
from .pruning import (
    PruningPlan,
    importance_scores,
    parameter_ratio,
    prune_model,
    random_plan,
    select_layers,
)
from .training import finetune, finetune_config, train

log = logging.getLogger(__name__)


def load_dataset(rc: RunConfig) -> TimeSeriesDataset:
    d = rc.data
    if d.source == "csv":
        ds = load_csv(d.path, has_time_column=d.time_column)
    else:
        ds = synth_generate(rc.synth_spec())
    return split_chronological(ds, d.split, d.train_frac, d.val_frac, d.samples_per_day)


def build_windows(rc: RunConfig, ds: TimeSeriesDataset) -> dict[str, WindowSet]:
    m = rc.model
    return {s: make_windows(ds, s, m.t_in, m.t_out) for s in ("train", "val", "test")}


def train_model(rc: RunConfig, windows: dict[str, WindowSet], history_path=None):
    model = ForecastModel.init(rc.model)
    return train(model, windows["train"], windows["val"], rc.train, history_path)


def analyze_model(
    model: ForecastModel, windows_val: WindowSet, cfg: ImportanceConfig, batch_limit=None, batch_size: int = 64
) -> ImportanceReport:
    summary = collect_trace(model, windows_val, batch_limit, batch_size, cfg.preceding_layers)
    return importance_scores(summary, cfg)


def prune_and_finetune(
    model: ForecastModel,
    plan: PruningPlan,
    windows: dict[str, WindowSet],
    rc: RunConfig,
    do_finetune: bool = True,
    history_path=None,
):
    pruned = prune_model(model, plan)
    history: list[dict] = []
    if do_finetune:
        pruned, history = finetune(pruned, windows["train"], windows["val"], finetune_config(rc.train), history_path)
    return pruned, history


def model_row(model: ForecastModel, windows: WindowSet, original: ForecastModel, **extra) -> dict:
    res: EvalResult = evaluate(model, windows)
    return {
        "mae": res.mae,
        "mse": res.mse,
        "layers": list(model.layer_ids),
        "n_layers": model.n_layers,
        "params": count_parameters(model),
        "layer_ratio": model.n_layers / original.n_layers,
        "param_ratio": parameter_ratio(original, model),
        **extra,
    }


@dataclass
class PipelineResult:
    original: ForecastModel
    report: ImportanceReport
    plan: PruningPlan
    pruned: ForecastModel
    pruned_no_ft: ForecastModel
    comparison: dict
    histories: dict = field(default_factory=dict)
    random_plan: PruningPlan | None = None
    random_model: ForecastModel | None = None


def comparison_table(
    original: ForecastModel,
    pruned: ForecastModel,
    pruned_no_ft: ForecastModel,
    plan: PruningPlan,
    test: WindowSet,
    random_model: ForecastModel | None = None,
    finetuned: bool = True,
) -> dict:
    """Original vs pruned accuracy with layer and parameter ratios."""
    interior_total = max(original.n_layers - 2, 0)
    table = {
        "original": model_row(original, test, original),
        "pruned": model_row(pruned, test, original, finetuned=finetuned),
        "pruned_without_finetune": model_row(pruned_no_ft, test, original, finetuned=False),
        "plan": plan.to_dict(),
        "critical_layer_ratio": len(plan.retained) / original.n_layers,
        "interior_ratio": (len(plan.interior_retained) / interior_total) if interior_total else 1.0,
        "param_ratio": parameter_ratio(original, pruned),
        "n_test_windows": len(test),
    }
    if random_model is not None:
        table["random"] = model_row(random_model, test, original, finetuned=finetuned)
    return table


def run_pipeline(
    rc: RunConfig,
    with_random: bool = True,
    do_finetune: bool = True,
    model: ForecastModel | None = None,
) -> PipelineResult:
    """train -> analyze -> select -> prune -> fine-tune (+ random baseline of equal size)."""
    ds = load_dataset(rc)
    win = build_windows(rc, ds)
    histories = {}
    if model is None:
        model, histories["train"] = train_model(rc, win)
    report = analyze_model(model, win["val"], rc.importance, rc.batch_limit, rc.analysis_batch_size)
    plan = select_layers(report)
    pruned_no_ft = prune_model(model, plan)
    pruned, histories["finetune"] = prune_and_finetune(model, plan, win, rc, do_finetune)
    rplan = rmodel = None
    if with_random:
        rplan = random_plan(model, len(plan.interior_retained), rc.seed)
        rmodel, histories["random_finetune"] = prune_and_finetune(model, rplan, win, rc, do_finetune)
    comp = comparison_table(model, pruned, pruned_no_ft, plan, win["test"], rmodel, do_finetune)
    return PipelineResult(model, report, plan, pruned, pruned_no_ft, comp, histories, rplan, rmodel)


def predictions_frame(pred: np.ndarray, truth: np.ndarray) -> list[tuple]:
    """Rows (window, step, channel, forecast, truth) in window-major order."""
    n, t, v = pred.shape
    rows = []
    for w in range(n):
        for s in range(t):
            for c in range(v):
                rows.append((w, s, c, float(pred[w, s, c]), float(truth[w, s, c])))
    return rows
