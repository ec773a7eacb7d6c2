import json

import numpy as np
import pytest
from conftest import random_model, tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dscope import pruning
from dscope.analysis import ImportanceConfig, ImportanceReport, LayerRecord, TraceSummary
from dscope.data import WindowSet
from dscope.model import count_parameters, forward
from dscope.pruning import (
    PlanError,
    PruningPlan,
    TimerResolutionError,
    full_plan,
    importance_scores,
    measure_speedup,
    pct_count,
    prune_model,
    random_plan,
    select_layers,
    zero_skipped_blocks,
)


def make_report(scores, dists=None, cfg=None):
    """Report over len(scores) + 2 layers; ``scores`` are the interior layers'."""
    cfg = cfg or ImportanceConfig()
    n = len(scores) + 2
    dists = dists or [1.0] * len(scores)
    layers = [LayerRecord(0, 1.0, 0.9, 0.5, 0.9, 1.0, 0.0, False, False)]
    for i, (s, d) in enumerate(zip(scores, dists), start=1):
        layers.append(LayerRecord(i, d, 0.9, 0.5, 0.9, 1.0, s, True, True))
    layers.append(LayerRecord(n - 1, 1.0, 0.9, 0.5, 0.9, 1.0, 0.0, False, False))
    interior = layers[1:-1]
    ranking = [r.layer_id for r in sorted(interior, key=lambda r: (-r.score, -r.dist, r.layer_id))]
    return ImportanceReport(cfg, layers, ranking, [r.layer_id for r in interior], 1, 1, 4)


# ---------------------------------------------------------------------------
# scoring


def _summary(n, head_sim, pred_sim, dist):
    s = TraceSummary(list(range(n)), 3)
    s.count = 1
    s.batches = 1
    s.n_patches = 4
    s.head_sim[:] = head_sim
    s.pred_sim[:] = np.asarray(pred_sim)[:, None]
    s.sim_prev[:] = pred_sim
    s.dist[:] = dist
    s.entropy[:] = 1.0
    return s


def test_score_product_and_gate():
    # 5 interior layers, tau 80% -> top 4 by distance are gated; layer 5 (smallest dist) is not
    s = _summary(7, head_sim=0.5, pred_sim=[0.5] * 7, dist=[9, 6, 5, 4, 3, 0.1, 9])
    rep = importance_scores(s, ImportanceConfig())
    assert_allclose(rep.layer(1).score, 0.25, rtol=1e-15)
    assert rep.layer(5).score == 0.0 and not rep.layer(5).gated
    assert rep.layer(0).score == 0.0 and not rep.layer(0).interior
    assert sorted(rep.ranking) == rep.tau_gate == [1, 2, 3, 4]


def test_unit_head_similarity_zeroes_score():
    s = _summary(5, head_sim=1.0, pred_sim=[0.0] * 5, dist=[1, 2, 3, 4, 5])
    rep = importance_scores(s, ImportanceConfig(tau_pct=100))
    assert all(r.score == 0.0 for r in rep.layers)


def test_ungated_layer_scores_zero_even_when_dissimilar():
    s = _summary(5, head_sim=0.0, pred_sim=[0.0] * 5, dist=[1, 5, 4, 0.1, 1])
    rep = importance_scores(s, ImportanceConfig(tau_pct=67))
    assert rep.layer(3).score == 0.0
    assert rep.layer(1).score == 1.0


def test_tiny_tau_is_a_config_error():
    s = _summary(5, head_sim=0.0, pred_sim=[0.0] * 5, dist=[1, 2, 3, 4, 5])
    with pytest.raises(PlanError):
        importance_scores(s, ImportanceConfig(tau_pct=10))


def test_single_interior_layer_below_gate_resolution():
    # floor(0.8 * 1) == 0: the gate cannot admit a single interior layer at tau 80%
    s = _summary(3, head_sim=0.5, pred_sim=[0.5] * 3, dist=[1, 2, 3])
    with pytest.raises(PlanError):
        importance_scores(s, ImportanceConfig())
    assert importance_scores(s, ImportanceConfig(tau_pct=100)).ranking == [1]


def test_negative_similarity_is_flagged_and_clamped():
    s = _summary(4, head_sim=-1.0, pred_sim=[-1.0] * 4, dist=[1, 2, 3, 4])
    rep = importance_scores(s, ImportanceConfig(tau_pct=100))
    rec = rep.layer(1)
    assert rec.score == 2.0
    assert "negative_similarity" in rec.flags and "score_clamped" in rec.flags


def test_two_layer_model_has_nothing_to_prune():
    s = _summary(2, head_sim=0.5, pred_sim=[0.5, 0.5], dist=[1, 1])
    rep = importance_scores(s, ImportanceConfig())
    assert rep.ranking == [] and rep.interior_ids == []
    assert any("nothing to prune" in w for w in rep.warnings)
    assert select_layers(rep).retained == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.integers(4, 12), st.integers(0, 2**32 - 1))
def test_report_invariants(n, seed):
    rng = np.random.default_rng(seed)
    s = _summary(n, head_sim=rng.uniform(0, 1, n), pred_sim=rng.uniform(0, 1, n), dist=rng.uniform(0, 5, n))
    rep = importance_scores(s, ImportanceConfig())
    assert sorted(rep.ranking) == rep.tau_gate
    for r in rep.layers:
        assert 0.0 <= r.score <= 1.0
        if r.layer_id not in rep.tau_gate:
            assert r.score == 0.0
        assert -1 <= r.sim_prev <= 1 and -1 <= r.head_sim <= 1 and -1 <= r.redundancy <= 1


# ---------------------------------------------------------------------------
# selection


def test_cumulative_walk_by_hand():
    rep = make_report([0.5, 0.3, 0.2, 0.0, 0.0], cfg=ImportanceConfig(top_pct=100))
    plan = select_layers(rep)
    assert plan.interior_retained == [1, 2, 3]
    assert all(plan.criteria[l] == "cum_pct" for l in (1, 2, 3))


def test_equal_scores_capped_lowest_index_first():
    rep = make_report([0.1] * 6)
    plan = select_layers(rep)
    assert plan.interior_retained == [1, 2, 3]
    assert all(plan.criteria[l] == "top_pct" for l in (1, 2, 3))


def test_ties_broken_by_distance():
    rep = make_report([0.2, 0.2, 0.6], dists=[1.0, 3.0, 1.0], cfg=ImportanceConfig(cum_pct=70, top_pct=100))
    assert rep.ranking == [3, 2, 1]
    assert select_layers(rep).interior_retained == [2, 3]


def test_no_prune_limit():
    rep = make_report([0.4, 0.3, 0.2, 0.1], cfg=ImportanceConfig(cum_pct=100, top_pct=100))
    assert select_layers(rep).retained == list(range(6))


def test_empty_ranking_is_error():
    rep = make_report([0.1, 0.2])
    rep.ranking = []
    with pytest.raises(PlanError):
        select_layers(rep)


def test_pct_count_floor():
    assert pct_count(50, 6) == 3
    assert pct_count(80, 6) == 4
    assert pct_count(50, 5) == 2
    assert pct_count(100, 7) == 7


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10), st.floats(1, 99), st.floats(1, 100))
def test_raising_beta_never_removes_layers(scores, beta, extra):
    lo = ImportanceConfig(cum_pct=beta, top_pct=100)
    hi = ImportanceConfig(cum_pct=min(100.0, beta + extra), top_pct=100)
    rep = make_report(scores)
    a, b = select_layers(rep, lo), select_layers(rep, hi)
    assert set(a.retained) <= set(b.retained)
    assert a.retained == select_layers(rep, lo).retained  # deterministic


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10), st.floats(1, 100), st.floats(1, 100))
def test_plan_invariants(scores, beta, top):
    rep = make_report(scores)
    plan = select_layers(rep, ImportanceConfig(cum_pct=beta, top_pct=top))
    n = len(scores) + 2
    assert plan.retained[0] == 0 and plan.retained[-1] == n - 1
    assert plan.retained == sorted(set(plan.retained))
    assert len(plan.interior_retained) <= pct_count(top, len(scores))
    assert set(plan.criteria.values()) <= {"exempt", "top_pct", "cum_pct"}


def test_plan_json_roundtrip():
    plan = select_layers(make_report([0.5, 0.3, 0.2]))
    again = PruningPlan.from_dict(json.loads(plan.to_json()))
    assert again == plan
    assert plan.to_dict()["report_digest"] == make_report([0.5, 0.3, 0.2]).digest()


# ---------------------------------------------------------------------------
# structural pruning


def test_retain_all_is_bitwise_identity(model, x_batch):
    pruned = prune_model(model, full_plan(model))
    assert_array_equal(forward(pruned, x_batch)[0].data, forward(model, x_batch)[0].data)
    assert count_parameters(pruned) == count_parameters(model)


@pytest.mark.parametrize("retained", [[0, 2], [0, 1, 2], [0, 1, 3, 5], [0, 5]])
def test_pruned_equals_zeroed_full_model(retained):
    cfg = tiny_config(layers=6)
    m = random_model(cfg, seed=3)
    plan = PruningPlan(retained if retained[-1] == 5 else retained + [5], [0, 5], {})
    x = np.random.default_rng(1).standard_normal((4, cfg.t_in, 3))
    a = forward(prune_model(m, plan), x)[0].data
    b = forward(zero_skipped_blocks(m, plan), x)[0].data
    assert_allclose(a, b, rtol=0, atol=1e-12)
    assert count_parameters(prune_model(m, plan)) < count_parameters(m)


def test_prune_preserves_non_block_parameters(model):
    plan = PruningPlan([0, 2], [0, 2], {})
    pruned = prune_model(model, plan)
    assert pruned.layer_ids == [0, 2]
    for k in ("embed.w", "pos", "ln_f.g", "head.w", "head.b"):
        assert pruned.params[k] is model.params[k]
    assert not any(k.startswith("blocks.1.") for k in pruned.params)


@settings(max_examples=20, deadline=None)
@given(st.sets(st.integers(1, 4)), st.sets(st.integers(1, 4)))
def test_nested_prunes_equal_intersection(a, b):
    cfg = tiny_config(layers=6)
    m = random_model(cfg, seed=5)
    x = np.random.default_rng(2).standard_normal((2, cfg.t_in, 1))
    pa = PruningPlan(sorted({0, 5} | a), [0, 5], {})
    inner = sorted({0, 5} | (a & b))
    twice = prune_model(prune_model(m, pa), PruningPlan(inner, [0, 5], {}))
    once = prune_model(m, PruningPlan(inner, [0, 5], {}))
    assert twice.layer_ids == once.layer_ids
    assert_allclose(forward(twice, x)[0].data, forward(once, x)[0].data, rtol=0, atol=1e-12)


def test_plan_model_mismatch(model):
    pruned = prune_model(model, PruningPlan([0, 2], [0, 2], {}))
    with pytest.raises(PlanError):
        prune_model(pruned, PruningPlan([0, 1, 2], [0, 2], {}))


def test_critical_ratio_28_layers_keep_6():
    plan = PruningPlan([0, 3, 9, 14, 20, 27], [0, 27], {}, original_layers=28)
    assert round(plan.layer_ratio() * 100) == 21


# ---------------------------------------------------------------------------
# random baseline


def test_random_plan_limits_and_determinism(model):
    cfg = tiny_config(layers=8)
    m = random_model(cfg)
    assert random_plan(m, 6, 0).retained == list(range(8))
    assert random_plan(m, 3, 4).retained == random_plan(m, 3, 4).retained
    p = random_plan(m, 2, 9)
    assert len(p.interior_retained) == 2 and p.retained[0] == 0 and p.retained[-1] == 7
    with pytest.raises(PlanError):
        random_plan(m, 7, 0)


def test_random_plan_matches_critical_count():
    cfg = tiny_config(layers=8)
    m = random_model(cfg)
    crit = select_layers(make_report([0.4, 0.3, 0.1, 0.1, 0.05, 0.05]))
    assert len(random_plan(m, len(crit.interior_retained), 1).interior_retained) == len(crit.interior_retained)


# ---------------------------------------------------------------------------
# timing


def _windows(cfg, n):
    rng = np.random.default_rng(0)
    return WindowSet(rng.standard_normal((n, cfg.t_in, 1)), rng.standard_normal((n, cfg.t_out, 1)), np.arange(n))


def test_identity_speedup_near_one():
    from dscope.model import ForecastModel, ModelConfig

    cfg = ModelConfig(layers=4)
    m = ForecastModel.init(cfg)
    res = measure_speedup(m, m, _windows(cfg, 64), runs=30, warmup=5)
    assert set(res) >= {"t_orig", "t_pruned", "ratio"}
    assert 0.9 <= res["ratio"] <= 1.1


def test_timer_resolution_guard(cfg, monkeypatch):
    # sub-millisecond medians must be rejected whatever the host speed
    monkeypatch.setattr(pruning, "time_forward", lambda model, x, runs, warmup: [2e-4] * runs)
    m = random_model(cfg)
    with pytest.raises(TimerResolutionError, match="below 1 ms"):
        measure_speedup(m, m, _windows(cfg, 1), runs=30, warmup=5)


def test_run_count_contract(cfg, model):
    with pytest.raises(ValueError):
        measure_speedup(model, model, _windows(cfg, 4), runs=10)
