from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from desmoe.moe_core import BACKBONE, EXPERT, ROUTER
from desmoe.schedule import Phase, PhasePlan, phase_of, update_mask

GROUPS = {
    "embed": BACKBONE, "layer.0.attn": BACKBONE, "layer.0.router": ROUTER, "layer.0.adaptive_router": ROUTER,
    "layer.0.expert.0": EXPERT, "layer.0.expert.1": EXPERT, "layer.0.expert.2": EXPERT, "layer.0.ln2": BACKBONE,
    "head": BACKBONE,
}
ROUTING = ["layer.0.adaptive_router"]


def oracle(t, t1, t2, allowed):
    """Independent table of the trainable groups per step."""
    domain = {f"layer.0.expert.{e}" for e in allowed}
    if t <= t1:
        return {"embed", "layer.0.attn", "layer.0.ln2", "head", "layer.0.adaptive_router"}
    if t <= t2:
        return {"layer.0.adaptive_router"} | domain
    return domain


def test_default_boundaries_for_100_steps():
    plan = PhasePlan.from_fractions(100)
    assert (plan.t1, plan.t2) == (20, 70)
    assert phase_of(plan, 20) is Phase.WARMUP
    assert phase_of(plan, 21) is Phase.STABILIZATION
    assert phase_of(plan, 70) is Phase.STABILIZATION
    assert phase_of(plan, 71) is Phase.CONSOLIDATION


def test_trace_matches_oracle_every_step():
    plan = PhasePlan.from_fractions(100)
    for t in range(1, 101):
        got = update_mask(plan, t, GROUPS, ROUTING, [{0, 2}])
        assert got == oracle(t, 20, 70, {0, 2}), t


def test_frozen_teacher_router_never_trainable():
    plan = PhasePlan.from_fractions(50)
    for t in range(1, 51):
        assert "layer.0.router" not in update_mask(plan, t, GROUPS, ROUTING, [{0, 1, 2}])


def test_experts_in_warmup_flag():
    plan = PhasePlan.from_fractions(10)
    got = update_mask(plan, 1, GROUPS, ROUTING, [{0}], experts_in_warmup=True)
    assert {"layer.0.expert.0", "layer.0.expert.1", "layer.0.expert.2"} <= got


@given(st.integers(2, 5000))
def test_phases_partition_steps(total):
    plan = PhasePlan.from_fractions(total) if total >= 3 else PhasePlan(total, 1, 2)
    counts = {p: 0 for p in Phase}
    prev = None
    order = list(Phase)
    for t in range(1, total + 1):
        p = phase_of(plan, t)
        counts[p] += 1
        if prev is not None:
            assert order.index(p) >= order.index(prev)
        prev = p
    assert sum(counts.values()) == total
    assert counts[Phase.WARMUP] == plan.t1
    assert counts[Phase.STABILIZATION] == plan.t2 - plan.t1


def test_monotone_narrowing_of_router_and_backbone():
    plan = PhasePlan.from_fractions(40)
    seen_router = seen_backbone = True
    for t in range(1, 41):
        got = update_mask(plan, t, GROUPS, ROUTING, [{1}])
        has_router = "layer.0.adaptive_router" in got
        has_backbone = "embed" in got
        assert not (has_router and not seen_router)
        assert not (has_backbone and not seen_backbone)
        seen_router, seen_backbone = has_router, has_backbone


def test_ceil_fractions_are_exact():
    # 0.7 * 100 must not round up to 71
    assert PhasePlan.from_fractions(100).t2 == 70
    assert PhasePlan.from_fractions(7).t1 == 2 and PhasePlan.from_fractions(7).t2 == 5
    assert PhasePlan.from_fractions(1000, 0.15, 0.65) == PhasePlan(1000, 150, 650)


def test_invalid_plans_and_steps():
    with pytest.raises(ValueError):
        PhasePlan(10, 5, 5)
    with pytest.raises(ValueError):
        PhasePlan(10, 0, 5)
    with pytest.raises(ValueError):
        phase_of(PhasePlan(10, 2, 7), 0)
    with pytest.raises(ValueError):
        phase_of(PhasePlan(10, 2, 7), 11)
