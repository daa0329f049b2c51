from dataclasses import replace

import numpy as np
import pytest

from adherence.allocation import AllocationInstance, greedy_allocate, id_ranks
from adherence.cohort import Cohort, QuarterlyRecord
from adherence.rewards import InterventionParams
from adherence.rules import (
    DLRTracker,
    RuleKind,
    bip_dlr_step,
    bip_rule_plan,
    marginal_step,
    standard_step,
)
from adherence.simulation import SimulationContext

PARAMS = InterventionParams(0.8, 0.1)


def test_rule_names_parse():
    assert RuleKind.parse("BIP_DLR") is RuleKind.BIP_DLR
    with pytest.raises(ValueError):
        RuleKind.parse("oracle")


def test_standard_all_adherent_selects_nobody():
    d = standard_step(1, np.full(4, 0.95), np.full(4, 0.3), np.ones(4, bool), 2, np.arange(4))
    assert d.selected.size == 0 and d.eligible_count == 0


def test_standard_ranks_by_risk():
    d = standard_step(1, np.array([0.5, 0.6, 0.7]), np.array([0.3, 0.2, 0.25]), np.ones(3, bool), 2, np.arange(3))
    assert d.selected.tolist() == [0, 2]


def test_standard_excludes_successful_patients():
    pool = np.array([False, True, True])
    d = standard_step(2, np.array([0.1, 0.6, 0.7]), np.array([0.9, 0.2, 0.25]), pool, 1, np.arange(3))
    assert d.selected.tolist() == [2]


def test_standard_ties_go_to_identifier_order():
    d = standard_step(1, np.zeros(3), np.full(3, 0.2), np.ones(3, bool), 2, np.array([2, 0, 1]))
    assert d.selected.tolist() == [1, 2]


def test_zero_forecasts_fall_back_to_identifier_order():
    a = bip_rule_plan(np.zeros((4, 3)), np.array([0.1, 0.2, 0.3, 0.4]), InterventionParams(1.0, 0.1))
    d = marginal_step(1, a, np.ones(4, bool), 2, np.array([3, 2, 1, 0]))
    assert np.all(a == 0) and d.selected.tolist() == [2, 3]


def test_single_epoch_matches_greedy():
    rng = np.random.default_rng(0)
    a = bip_rule_plan(rng.random((8, 1)), rng.uniform(0.05, 0.5, 8), PARAMS)
    d = marginal_step(1, a, np.ones(8, bool), 3, np.arange(8))
    plan = greedy_allocate(AllocationInstance(a, 3))
    assert d.selected.tolist() == sorted(i for i, _ in plan.assignments)


def test_capacity_above_pool_selects_whole_pool():
    a = np.random.default_rng(1).random((5, 2))
    a = np.sort(a, axis=1)[:, ::-1]
    pool = np.array([True, False, True, True, False])
    assert marginal_step(1, a, pool, 10, np.arange(5)).selected.tolist() == [0, 2, 3]


def test_bip_plan_reproducible(small_context):
    a1 = bip_rule_plan(small_context.origin_yearly, small_context.baseline, PARAMS)
    a2 = bip_rule_plan(small_context.origin_yearly, small_context.baseline, PARAMS)
    assert np.array_equal(a1, a2)


def tracker_for(ctx):
    state, u = ctx.model
    return DLRTracker(ctx.arrays, ctx.origin, ctx.T, state, u)


def test_first_epoch_dlr_equals_bip(small_context):
    ctx = small_context
    pool = np.ones(ctx.n, bool)
    c = 40
    d_dlr = bip_dlr_step(tracker_for(ctx), 1, ctx.baseline, pool, c, ctx.id_rank, PARAMS)
    a = bip_rule_plan(ctx.origin_yearly, ctx.baseline, PARAMS)
    d_bip = marginal_step(1, a, pool, c, ctx.id_rank)
    assert d_dlr.selected.tolist() == d_bip.selected.tolist()
    np.testing.assert_allclose(d_dlr.scores, d_bip.scores, rtol=1e-12)


def test_collapsed_adherence_raises_dlr_rank(small_cohort):
    base = SimulationContext(small_cohort)
    k0 = small_cohort.origin_quarter - 1
    # A patient who adhered throughout the first horizon year.
    steady = [i for i, p in enumerate(small_cohort.patients) if all(q.adherent for q in p.quarters[k0 : k0 + 8])]
    i = steady[0]
    p = small_cohort.patients[i]
    quarters = list(p.quarters)
    for k in range(k0, k0 + 4):
        q = quarters[k]
        quarters[k] = QuarterlyRecord(q.quarter_index, 0.2, False, q.sbp, q.ldl, q.total_cholesterol, q.n_bp_tests_cum, q.n_chol_tests_cum)
    patients = list(small_cohort.patients)
    patients[i] = replace(p, quarters=quarters)
    changed = SimulationContext(Cohort(patients, small_cohort.adherence_threshold, small_cohort.quarter_length_days, small_cohort.origin_quarter))
    # Share the initial fit so only the observed year differs.
    changed.__dict__["model"] = base.model
    changed.__dict__["origin_yearly"] = base.origin_yearly

    def rank_at_epoch2(ctx, dlr):
        pool = np.ones(ctx.n, bool)
        if dlr:
            d = bip_dlr_step(tracker_for(ctx), 2, ctx.baseline, pool, 10, ctx.id_rank, PARAMS)
        else:
            a = bip_rule_plan(ctx.origin_yearly, ctx.baseline, PARAMS)
            d = marginal_step(2, a[:, 1:], pool, 10, ctx.id_rank)
        return int(np.sum(d.scores > d.scores[i]))

    assert rank_at_epoch2(changed, dlr=True) < rank_at_epoch2(changed, dlr=False)


def test_tracker_only_moves_forward(small_context):
    t = tracker_for(small_context)
    rows = np.arange(small_context.n)
    t.observe_through(small_context.origin + 3, rows)
    epoch = t.state.epoch
    t.observe_through(small_context.origin + 1, rows)
    assert t.state.epoch == epoch == 4
    assert id_ranks(["b", "a", "c"]).tolist() == [1, 0, 2]
