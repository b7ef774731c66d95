"""Three-phase parameter specialization schedule.

Steps ``1..T1`` warm up router and backbone, ``T1+1..T2`` stabilise router
plus the batch domain's experts, and ``T2+1..T`` consolidate the domain's
experts alone.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

from .moe_core import BACKBONE, EXPERT, ROUTER


class Phase(enum.Enum):
    WARMUP = "warmup"
    STABILIZATION = "stabilization"
    CONSOLIDATION = "consolidation"


def _ceil_fraction(total: int, frac: float) -> int:
    # Fraction(str(.)) keeps 0.7 * 100 at exactly 70
    return math.ceil(Fraction(str(frac)) * total)


@dataclass(frozen=True)
class PhasePlan:
    total_steps: int
    t1: int
    t2: int

    def __post_init__(self):
        if not 0 < self.t1 < self.t2 <= self.total_steps:
            raise ValueError(f"phase boundaries must satisfy 0 < T1 < T2 <= T (got {self.t1}, {self.t2}, {self.total_steps})")

    @classmethod
    def from_fractions(cls, total_steps: int, warmup: float = 0.2, stabilize: float = 0.7) -> PhasePlan:
        return cls(total_steps, _ceil_fraction(total_steps, warmup), _ceil_fraction(total_steps, stabilize))


def phase_of(plan: PhasePlan, t: int) -> Phase:
    if not 1 <= t <= plan.total_steps:
        raise ValueError(f"step {t} outside [1, {plan.total_steps}]")
    if t <= plan.t1:
        return Phase.WARMUP
    if t <= plan.t2:
        return Phase.STABILIZATION
    return Phase.CONSOLIDATION


def update_mask(plan: PhasePlan, t: int, groups: dict[str, str], routing_groups,
                experts_allowed: list[set[int]], experts_in_warmup: bool = False) -> frozenset[str]:
    """Names of the parameter groups allowed to change at step ``t``.

    ``groups`` maps group name to kind, ``routing_groups`` are the router
    groups in use (a frozen teacher router is never among them), and
    ``experts_allowed[l]`` is the expert set of the batch domain in layer ``l``.
    ``experts_in_warmup`` adds every expert to the warm-up mask (ablation).
    """
    phase = phase_of(plan, t)
    routers = set(routing_groups)
    domain_experts = {f"layer.{li}.{EXPERT}.{e}" for li, es in enumerate(experts_allowed) for e in es}
    allowed = set()
    if phase is Phase.WARMUP:
        allowed |= routers
        allowed |= {g for g, kind in groups.items() if kind == BACKBONE}
        if experts_in_warmup:
            allowed |= {g for g, kind in groups.items() if kind == EXPERT}
    elif phase is Phase.STABILIZATION:
        allowed |= routers | domain_experts
    else:
        allowed |= domain_experts
    return frozenset(g for g in allowed if g in groups and (groups[g] != ROUTER or g in routers))
