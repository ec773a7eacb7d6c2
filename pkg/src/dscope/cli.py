"""Command-line entry point: ``dscope {train,analyze,prune,eval,project,dump}``.

Exit codes: 0 success, 1 numeric or pipeline failure, 2 usage or config error.
Timestamps and wall-clock timings go to ``*.meta.json`` sidecars so the main
outputs are byte-identical across runs with the same seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analysis import ImportanceReport, summarize
from .data import ConfigError as DataConfigError
from .data import DataFormatError
from .io import FormatError, concat_traces, load_checkpoint, read_trace_dump, save_checkpoint, write_trace_dump
from .metrics import error_metrics
from .model import ModelConfigError, forward, project_hidden_to_series
from .pipeline import (
    analyze_model,
    build_windows,
    comparison_table,
    load_dataset,
    predictions_frame,
    prune_and_finetune,
    train_model,
)
from .pruning import PlanError, full_plan, importance_scores, measure_speedup, prune_model, random_plan, select_layers
from .tensor import NumericError
from .training import TrainingDiverged

log = logging.getLogger("dscope")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PREDICT_CHUNK = 256


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            i += 1
            val = extra[i]
        if key not in cfgmod.KNOWN_KEYS:
            raise UsageError(f"unknown option --{key}")
        out[key] = val
        i += 1
    return out


def _resolve(args, extra) -> cfgmod.RunConfig:
    overrides = _split_overrides(extra)
    if args.out:
        overrides["out"] = args.out
    rc = cfgmod.load(args.config, overrides)
    if rc.data.source == "csv" and not Path(rc.data.path).exists():
        raise FileNotFoundError(f"dataset not found: {rc.data.path}")
    return rc


def _out_dir(rc) -> Path:
    p = Path(rc.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_meta(path: Path, command: str, started: float, **extra) -> None:
    now = time.time()
    _write_json(
        path,
        {
            "command": command,
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "finished": datetime.fromtimestamp(now, timezone.utc).isoformat(),
            "duration_s": now - started,
            **extra,
        },
    )


def _checkpoint_path(args, rc) -> Path:
    p = Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(rc.out) / "model.dsck"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _write_rows(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "step", "channel", "forecast", "truth"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4])])


def _val_traces(model, windows, rc):
    traces = []
    for bi, b in enumerate(windows.batches(rc.analysis_batch_size)):
        if rc.batch_limit is not None and bi >= rc.batch_limit:
            break
        traces.append(forward(model, b.inputs, capture=True)[1])
    return traces


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, rc) -> int:
    t0 = time.time()
    out = _out_dir(rc)
    ds = load_dataset(rc)
    win = build_windows(rc, ds)
    model, history = train_model(rc, win, out / "history.jsonl")
    save_checkpoint(model, out / "model.dsck")
    (out / "run.cfg").write_text(rc.dumps(), encoding="utf-8")
    _write_meta(out / "train.meta.json", "train", t0, epochs=len(history))
    print(f"trained {model.n_layers}-layer model for {len(history)} epochs -> {out / 'model.dsck'}")
    return EXIT_OK


def cmd_analyze(args, rc) -> int:
    t0 = time.time()
    out = _out_dir(rc)
    if args.dump:
        p = Path(args.dump)
        if not p.exists():
            raise FileNotFoundError(f"trace dump not found: {p}")
        trace = read_trace_dump(p)
        report = importance_scores(summarize([trace], rc.importance.preceding_layers), rc.importance)
    else:
        model = load_checkpoint(_checkpoint_path(args, rc))
        win = build_windows(rc, load_dataset(rc))
        report = analyze_model(model, win["val"], rc.importance, rc.batch_limit, rc.analysis_batch_size)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    target = Path(args.report) if args.report else out / "report.json"
    target.write_text(report.to_json(), encoding="utf-8")
    _write_meta(out / "analyze.meta.json", "analyze", t0)
    print(f"ranking {report.ranking} -> {target}")
    return EXIT_OK


def cmd_dump(args, rc) -> int:
    out = _out_dir(rc)
    model = load_checkpoint(_checkpoint_path(args, rc))
    win = build_windows(rc, load_dataset(rc))
    trace = concat_traces(_val_traces(model, win["val"], rc))
    target = Path(args.dump) if args.dump else out / "trace.ltrc"
    write_trace_dump(trace, target)
    print(f"wrote {trace.batch} samples x {len(trace.attn)} layers -> {target}")
    return EXIT_OK


def _format_table(comp: dict, timing: dict | None) -> str:
    lines = [f"{'model':<26}{'MAE':>10}{'MSE':>10}{'layers':>8}{'params':>10}"]
    for key in ("original", "pruned", "pruned_without_finetune", "random"):
        if key in comp:
            r = comp[key]
            lines.append(f"{key:<26}{r['mae']:>10.4f}{r['mse']:>10.4f}{r['n_layers']:>8}{r['params']:>10}")
    lines.append(f"critical layer ratio {comp['critical_layer_ratio']:.0%}, parameter ratio {comp['param_ratio']:.0%}")
    if timing:
        lines.append(f"efficiency {timing['ratio']:.2f}x (T_original / T_pruned)")
    return "\n".join(lines)


def cmd_prune(args, rc) -> int:
    t0 = time.time()
    out = _out_dir(rc)
    model = load_checkpoint(_checkpoint_path(args, rc))
    win = build_windows(rc, load_dataset(rc))
    if args.retain_all:
        plan = full_plan(model)
    else:
        rpath = Path(args.report) if args.report else out / "report.json"
        if rpath.exists():
            report = ImportanceReport.from_dict(json.loads(rpath.read_text(encoding="utf-8")))
        else:
            report = analyze_model(model, win["val"], rc.importance, rc.batch_limit, rc.analysis_batch_size)
            rpath.write_text(report.to_json(), encoding="utf-8")
        if report.warnings:
            for w in report.warnings:
                print(f"warning: {w}", file=sys.stderr)
        plan = select_layers(report, rc.importance)
    do_ft = args.finetune and not args.retain_all
    pruned_no_ft = prune_model(model, plan)
    pruned, hist = prune_and_finetune(model, plan, win, rc, do_ft, out / "finetune_history.jsonl" if do_ft else None)
    rmodel = None
    if args.random_baseline:
        seed = rc.seed if args.random_seed is None else args.random_seed
        rplan = random_plan(model, len(plan.interior_retained), seed)
        (out / "random_plan.json").write_text(rplan.to_json(), encoding="utf-8")
        rmodel, _ = prune_and_finetune(model, rplan, win, rc, do_ft)
        save_checkpoint(rmodel, out / "random.dsck")
    comp = comparison_table(model, pruned, pruned_no_ft, plan, win["test"], rmodel, do_ft)
    save_checkpoint(pruned, out / "pruned.dsck")
    (out / "plan.json").write_text(plan.to_json(), encoding="utf-8")
    _write_json(out / "comparison.json", comp)
    timing = None
    if args.speed_runs:
        timing = measure_speedup(model, pruned, win["val"], runs=args.speed_runs, warmup=rc.speed_warmup)
    _write_meta(out / "comparison.meta.json", "prune", t0, timing=timing)
    print(_format_table(comp, timing))
    return EXIT_OK


def cmd_eval(args, rc) -> int:
    out = _out_dir(rc)
    model = load_checkpoint(_checkpoint_path(args, rc))
    ds = load_dataset(rc)
    w = build_windows(rc, ds)[args.split]
    pred = np.concatenate(
        [forward(model, w.inputs[i : i + PREDICT_CHUNK])[0].data for i in range(0, len(w), PREDICT_CHUNK)]
    )
    truth = w.targets
    if args.scale == "raw":
        pred, truth = ds.destandardize(pred), ds.destandardize(truth)
    res = error_metrics(pred, truth, args.scale)
    _write_json(out / "eval.json", {**res.to_dict(), "split": args.split, "layers": list(model.layer_ids)})
    _write_rows(out / "predictions.csv", predictions_frame(pred, truth))
    print(f"{args.split}: MAE {res.mae:.4f} MSE {res.mse:.4f} ({res.n_windows} windows, {args.scale})")
    return EXIT_OK


def _parse_layers(spec: str, n_states: int) -> list[int]:
    if spec == "all":
        return list(range(n_states))
    try:
        layers = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad layer list {spec!r}") from None
    bad = [l for l in layers if not 0 <= l < n_states]
    if bad:
        raise UsageError(f"layers {bad} out of range: model has {n_states} captured states (0..{n_states - 1})")
    return layers


def cmd_project(args, rc) -> int:
    out = _out_dir(rc)
    model = load_checkpoint(_checkpoint_path(args, rc))
    layers = _parse_layers(args.layers, model.n_layers + 1)
    ds = load_dataset(rc)
    w = build_windows(rc, ds)[args.split]
    proj_dir = out / "project"
    proj_dir.mkdir(exist_ok=True)
    per_layer = {l: [] for l in layers}
    for i in range(0, len(w), PREDICT_CHUNK):
        _, trace = forward(model, w.inputs[i : i + PREDICT_CHUNK], capture=True)
        for l in layers:
            per_layer[l].append(project_hidden_to_series(model, trace, l))
    truth = w.targets
    if args.scale == "raw":
        truth = ds.destandardize(truth)
    for l in layers:
        pred = np.concatenate(per_layer[l])
        if args.scale == "raw":
            pred = ds.destandardize(pred)
        _write_rows(proj_dir / f"layer_{l}.csv", predictions_frame(pred, truth))
    print(f"wrote {len(layers)} projection CSVs -> {proj_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dscope",
        description="Critical-layer analysis and pruning for patch-transformer forecasters.",
        epilog="Any config key can be overridden as --dotted.key VALUE (e.g. --model.layers 4).",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help="output directory (overrides 'out')")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint (default: OUT/model.dsck)")
        return p

    common(sub.add_parser("train", help="train the reference model"), checkpoint=False)
    p = common(sub.add_parser("analyze", help="layer importance report"))
    p.add_argument("--dump", help="analyze a trace dump instead of a checkpoint")
    p.add_argument("--report", help="output report path (default: OUT/report.json)")
    p = common(sub.add_parser("prune", help="prune critical layers and fine-tune"))
    p.add_argument("--report", help="importance report (default: OUT/report.json, computed if absent)")
    p.add_argument("--finetune", dest="finetune", action="store_true", default=True)
    p.add_argument("--no-finetune", dest="finetune", action="store_false")
    p.add_argument("--random-baseline", action="store_true", help="also prune to a random plan of equal size")
    p.add_argument("--random-seed", type=int)
    p.add_argument("--retain-all", action="store_true", help="identity plan (sanity check)")
    p.add_argument("--speed-runs", type=int, default=30, help="timed runs for the efficiency ratio; 0 disables")
    p = common(sub.add_parser("eval", help="forecast accuracy on a split"))
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--scale", default="standardized", choices=["standardized", "raw"])
    p = common(sub.add_parser("project", help="forecasts from intermediate hidden states"))
    p.add_argument("--layers", default="all", help="'all' or comma-separated captured-state indices")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--scale", default="standardized", choices=["standardized", "raw"])
    p = common(sub.add_parser("dump", help="write validation traces in LTRC format"))
    p.add_argument("--dump", help="output path (default: OUT/trace.ltrc)")
    return parser


COMMANDS = {
    "train": cmd_train,
    "analyze": cmd_analyze,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "project": cmd_project,
    "dump": cmd_dump,
}


def _thread_cap():
    n = os.environ.get("DSCOPE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cap = _thread_cap()
    try:
        rc = _resolve(args, extra)
        return COMMANDS[args.command](args, rc)
    except (UsageError, cfgmod.ConfigError, DataConfigError, ModelConfigError, FileNotFoundError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingDiverged, FormatError, DataFormatError, FloatingPointError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if cap is not None:
            cap.restore_original_limits()


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
