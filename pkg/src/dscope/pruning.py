"""Critical-layer scoring, retention plans, structural removal and timing."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import ImportanceConfig, ImportanceReport, LayerRecord, TraceSummary
from .model import BLOCK_PARAMS, ForecastModel, block_key, count_parameters, forward
from .seeding import stream

log = logging.getLogger(__name__)

SCORE_CLAMP = (0.0, 2.0)
_PCT_EPS = 1e-9


class PlanError(ValueError):
    pass


class TimerResolutionError(RuntimeError):
    pass


def pct_count(pct: float, n: int) -> int:
    """Number of the ``n`` ranked items whose rank r satisfies r / n <= pct%."""
    return int(math.floor(pct * n / 100.0 + _PCT_EPS))


def importance_scores(summary: TraceSummary, cfg: ImportanceConfig) -> ImportanceReport:
    """Score interior layers; first and last layers are exempt and unscored.

    score = (1 - redundancy) * (1 - head_sim) for layers inside the distance
    gate (top ``tau_pct`` of interior layers by distance), else 0.
    """
    means = summary.means()
    red = summary.redundancy(cfg)
    ids = list(summary.layer_ids)
    n = len(ids)
    interior = list(range(1, n - 1))
    warnings: list[str] = []
    if not interior:
        warnings.append("nothing to prune: model has no interior layers")
    gate_n = pct_count(cfg.tau_pct, len(interior))
    if interior and gate_n == 0:
        raise PlanError(f"tau_pct={cfg.tau_pct} gates out all {len(interior)} interior layers")
    by_dist = sorted(interior, key=lambda i: (-means["dist"][i], i))
    gated = set(by_dist[:gate_n])

    records = []
    for i, lid in enumerate(ids):
        flags = []
        if means["sim_prev"][i] < 0 or means["head_sim"][i] < 0 or means["pred_sim"][i].min() < 0:
            flags.append("negative_similarity")
        if summary.zero_norm[i]:
            flags.append("zero_norm_state")
        if summary.single_head:
            flags.append("single_head")
        score = 0.0
        if i in gated:
            raw = (1.0 - red[i]) * (1.0 - means["head_sim"][i])
            score = float(min(max(raw, SCORE_CLAMP[0]), SCORE_CLAMP[1]))
            if score != raw:
                flags.append("score_clamped")
        records.append(
            LayerRecord(
                layer_id=lid,
                dist=float(means["dist"][i]),
                sim_prev=float(means["sim_prev"][i]),
                head_sim=float(means["head_sim"][i]),
                redundancy=float(red[i]),
                entropy=float(means["entropy"][i]),
                score=score,
                gated=i in gated,
                interior=0 < i < n - 1,
                flags=flags,
            )
        )
    ranking = sorted(gated, key=lambda i: (-records[i].score, -records[i].dist, i))
    return ImportanceReport(
        config=cfg,
        layers=records,
        ranking=[ids[i] for i in ranking],
        tau_gate=sorted(ids[i] for i in gated),
        batch_count=summary.batches,
        sample_count=summary.count,
        n_patches=summary.n_patches,
        warnings=warnings,
    )


@dataclass
class PruningPlan:
    retained: list[int]
    exempt: list[int]
    criteria: dict[int, str]
    config: dict = field(default_factory=dict)
    report_digest: str | None = None
    original_layers: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.retained, self.retained[1:])):
            raise PlanError(f"retained ids must be strictly increasing: {self.retained}")
        if not set(self.exempt) <= set(self.retained):
            raise PlanError("exempt layers must be retained")

    @property
    def interior_retained(self) -> list[int]:
        return [l for l in self.retained if l not in self.exempt]

    def layer_ratio(self) -> float:
        return len(self.retained) / self.original_layers if self.original_layers else 1.0

    def to_dict(self) -> dict:
        return {
            "retained": list(self.retained),
            "exempt": list(self.exempt),
            "criteria": {str(k): v for k, v in sorted(self.criteria.items())},
            "config": self.config,
            "report_digest": self.report_digest,
            "original_layers": self.original_layers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        return cls(
            retained=list(d["retained"]),
            exempt=list(d["exempt"]),
            criteria={int(k): v for k, v in d["criteria"].items()},
            config=d.get("config", {}),
            report_digest=d.get("report_digest"),
            original_layers=d.get("original_layers", 0),
        )


def select_layers(report: ImportanceReport, cfg: ImportanceConfig | None = None) -> PruningPlan:
    """Exempt ends plus the cumulative-score prefix of the ranking, capped at top_pct.

    The walk admits ranked layers until their share of the total gated score
    first reaches ``cum_pct``; if that admits more than ``top_pct`` of the
    interior layers, the prefix is truncated to that cap.
    """
    cfg = cfg or report.config
    ids = [r.layer_id for r in report.layers]
    exempt = sorted({ids[0], ids[-1]}) if ids else []
    interior = report.interior_ids
    criteria = {l: "exempt" for l in exempt}
    plan_cfg = {**cfg.to_dict()}
    if not interior:
        return PruningPlan(exempt, exempt, criteria, plan_cfg, report.digest(), len(ids))
    if not report.ranking:
        raise PlanError("empty ranking: no interior layer passed the distance gate")
    scores = {r.layer_id: r.score for r in report.layers}
    total = sum(scores[l] for l in report.ranking)
    admitted: list[int] = []
    if total > 0:
        cum = 0.0
        for l in report.ranking:
            admitted.append(l)
            cum += scores[l]
            if cum / total >= cfg.cum_pct / 100.0 - 1e-12:
                break
    else:
        log.warning("all gated scores are zero; retaining exempt layers only")
    cap = pct_count(cfg.top_pct, len(interior))
    rule = "cum_pct"
    if len(admitted) > cap:
        admitted = admitted[:cap]
        rule = "top_pct"
    for l in admitted:
        criteria[l] = rule
    retained = sorted(set(exempt) | set(admitted))
    return PruningPlan(retained, exempt, criteria, plan_cfg, report.digest(), len(ids))


def full_plan(model: ForecastModel) -> PruningPlan:
    ids = list(model.layer_ids)
    exempt = sorted({ids[0], ids[-1]}) if ids else []
    crit = {l: ("exempt" if l in exempt else "all") for l in ids}
    return PruningPlan(ids, exempt, crit, {}, None, len(ids))


def random_plan(model: ForecastModel, n_interior: int, seed: int) -> PruningPlan:
    """Exempt ends plus ``n_interior`` uniformly drawn interior layers."""
    ids = list(model.layer_ids)
    interior = ids[1:-1]
    if not 0 <= n_interior <= len(interior):
        raise PlanError(f"n_interior={n_interior} outside [0, {len(interior)}]")
    rng = stream(seed, "random-plan")
    chosen = sorted(int(x) for x in rng.choice(interior, size=n_interior, replace=False)) if n_interior else []
    exempt = sorted({ids[0], ids[-1]})
    criteria = {l: "exempt" for l in exempt}
    criteria.update({l: "random" for l in chosen})
    return PruningPlan(sorted(set(exempt) | set(chosen)), exempt, criteria, {"seed": seed}, None, len(ids))


def prune_model(model: ForecastModel, plan: PruningPlan) -> ForecastModel:
    """Keep only the planned blocks; everything else is copied verbatim."""
    missing = [l for l in plan.retained if l not in model.layer_ids]
    if missing:
        raise PlanError(f"plan retains layers {missing} that the model does not contain {model.layer_ids}")
    keep = set(plan.retained)
    params = {}
    for name, t in model.params.items():
        if name.startswith("blocks."):
            lid = int(name.split(".")[1])
            if lid not in keep:
                continue
        params[name] = t
    return ForecastModel(model.config, params, [l for l in model.layer_ids if l in keep])


def zero_skipped_blocks(model: ForecastModel, plan: PruningPlan) -> ForecastModel:
    """Same depth, but skipped blocks' residual branches output exactly zero."""
    keep = set(plan.retained)
    params = dict(model.params)
    for lid in model.layer_ids:
        if lid in keep:
            continue
        for name in BLOCK_PARAMS:
            if name.startswith(("attn.", "mlp.")):
                k = block_key(lid, name)
                params[k] = type(params[k])(np.zeros_like(params[k].data), requires_grad=True, name=k)
    return model.with_params(params)


def parameter_ratio(original: ForecastModel, pruned: ForecastModel) -> float:
    return count_parameters(pruned) / count_parameters(original)


# ---------------------------------------------------------------------------
# timing


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def time_forward(model: ForecastModel, inputs: np.ndarray, runs: int, warmup: int, batch_size: int = 256) -> list[float]:
    chunks = [inputs[i : i + batch_size] for i in range(0, len(inputs), batch_size)]
    times = []
    for r in range(warmup + runs):
        t0 = time.perf_counter()
        for c in chunks:
            forward(model, c)
        dt = time.perf_counter() - t0
        if r >= warmup:
            times.append(dt)
    return times


def measure_speedup(
    original: ForecastModel,
    pruned: ForecastModel,
    windows,
    runs: int = 30,
    warmup: int = 5,
) -> dict:
    """Median single-thread float32 inference time over the full window set.

    Runs of the two models are interleaved so drift affects both equally.
    """
    if runs < 30:
        raise ValueError("runs must be >= 30")
    if warmup < 5:
        raise ValueError("warmup must be >= 5")
    a = original.astype(np.float32)
    b = pruned.astype(np.float32)
    x = np.asarray(windows.inputs, dtype=np.float32)
    ta, tb = [], []
    with _single_thread():
        time_forward(a, x, 0, warmup)
        time_forward(b, x, 0, warmup)
        for _ in range(runs):
            ta += time_forward(a, x, 1, 0)
            tb += time_forward(b, x, 1, 0)
    t_orig = statistics.median(ta)
    t_pruned = statistics.median(tb)
    if min(t_orig, t_pruned) < 1e-3:
        raise TimerResolutionError(
            f"median forward time {min(t_orig, t_pruned) * 1e3:.3f} ms is below 1 ms; increase the workload"
        )
    return {"t_orig": t_orig, "t_pruned": t_pruned, "ratio": t_orig / t_pruned, "runs": runs, "warmup": warmup}
