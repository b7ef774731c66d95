"""Domain-guided expert specialization.

One :class:`AffinityState` per MoE layer counts how often each domain's
tokens select each expert, smooths those fractions across refreshes, and
thresholds them into a binary domain-by-expert mask that decides which
experts may learn from which tokens.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .moe_core import EXPERT, MoELayer, MoEModel, add_expert_copy

log = logging.getLogger(__name__)

DEFAULT_PHI = 0.6
DEFAULT_EMA_WEIGHT = 0.9


@dataclass
class Duplication:
    layer: int
    source: int
    copy: int
    domain: int
    step: int


@dataclass
class AffinityState:
    num_domains: int
    num_experts: int
    layer: int = 0
    phi: float = DEFAULT_PHI
    ema_weight: float = DEFAULT_EMA_WEIGHT
    max_duplications: int = 4
    counts: np.ndarray = None
    tokens: np.ndarray = None
    smoothed: np.ndarray | None = None
    last_fresh: np.ndarray | None = None
    mask: np.ndarray | None = None
    duplications: list[Duplication] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_domains, self.num_experts), dtype=np.int64)
        if self.tokens is None:
            self.tokens = np.zeros(self.num_domains, dtype=np.int64)

    @property
    def affinity(self) -> np.ndarray:
        """Raw affinity A[d, e]: selections of e per domain-d token since the last refresh."""
        with np.errstate(invalid="ignore", divide="ignore"):
            a = self.counts / self.tokens[:, None]
        return np.where(self.tokens[:, None] > 0, a, 0.0)

    def current_mask(self) -> np.ndarray:
        """The mask, or all ones before the first refresh."""
        if self.mask is None:
            return np.ones((self.num_domains, self.num_experts), dtype=bool)
        return self.mask


def accumulate_affinity(state: AffinityState, selected: np.ndarray, domains) -> None:
    """Add one forward pass's routing decisions (tokens x K) to the integer counters."""
    domains = np.asarray(domains).reshape(-1)
    selected = np.asarray(selected)
    if selected.shape[0] != domains.shape[0]:
        raise ValueError("one domain label per routed token is required")
    if domains.size and (domains.min() < 0 or domains.max() >= state.num_domains):
        raise ValueError(f"domain label outside [0, {state.num_domains})")
    if selected.size and selected.max() >= state.num_experts:
        raise ValueError("selected expert index exceeds the tracked expert count")
    k = selected.shape[1]
    np.add.at(state.counts, (np.repeat(domains, k), selected.reshape(-1)), 1)
    state.tokens += np.bincount(domains, minlength=state.num_domains)


def derive_mask(smoothed: np.ndarray, phi: float = DEFAULT_PHI, warnings: list | None = None) -> np.ndarray:
    """M[d, e] = smoothed[d, e] >= phi * max_e' smoothed[d, e'] (inclusive).

    A row that is entirely zero (domain never observed) becomes all ones.
    """
    smoothed = np.asarray(smoothed, dtype=np.float64)
    row_max = smoothed.max(axis=1, keepdims=True)
    mask = smoothed >= phi * row_max
    empty = row_max[:, 0] <= 0
    if empty.any():
        mask[empty] = True
        if warnings is not None:
            warnings.extend(f"domain {d} has no affinity; mask row set to all ones" for d in np.nonzero(empty)[0])
    return mask


def ema_refresh(state: AffinityState, fresh: np.ndarray | None = None) -> np.ndarray:
    """Blend fresh affinity into the smoothed one, refresh the mask, reset the counters.

    ``smoothed <- w * fresh + (1 - w) * smoothed`` with ``w = state.ema_weight``.
    The first refresh adopts ``fresh`` directly.  Domains that saw no tokens
    since the previous refresh keep their smoothed row.
    """
    observed = state.tokens > 0
    if fresh is None:
        fresh = state.affinity
    else:
        observed = np.ones(state.num_domains, dtype=bool)
    fresh = np.asarray(fresh, dtype=np.float64)
    state.last_fresh = fresh.copy()
    if state.smoothed is None:
        state.smoothed = fresh.copy()
    else:
        w = state.ema_weight
        blended = w * fresh + (1.0 - w) * state.smoothed
        state.smoothed = np.where(observed[:, None], blended, state.smoothed)
    state.mask = derive_mask(state.smoothed, state.phi, state.warnings)
    state.counts[:] = 0
    state.tokens[:] = 0
    return state.mask


def _grow(state: AffinityState, source: int) -> None:
    state.counts = np.concatenate([state.counts, np.zeros((state.num_domains, 1), dtype=np.int64)], axis=1)
    if state.last_fresh is not None:
        state.last_fresh = np.concatenate([state.last_fresh, state.last_fresh[:, source:source + 1]], axis=1)
    state.smoothed = np.concatenate([state.smoothed, state.smoothed[:, source:source + 1]], axis=1)
    state.mask = np.concatenate([state.mask, state.mask[:, source:source + 1]], axis=1)
    state.num_experts += 1


def resolve_shared_experts(state: AffinityState, layer: MoELayer, step: int = 0) -> list[Duplication]:
    """Give every domain beyond the first its own copy of each multi-domain expert.

    The highest-affinity domain keeps the original (ties: the lower domain
    index keeps it).  Each copy is routable only for its domain during
    training, and the original stops being routable for that domain, so
    assigned-domain outputs are unchanged by the duplication.
    """
    if state.mask is None:
        return []
    if layer.availability is None:
        layer.availability = np.ones((state.num_domains, layer.num_experts), dtype=bool)
    actions = []
    for e in range(state.num_experts):
        claimants = np.nonzero(state.mask[:, e])[0]
        if claimants.size < 2:
            continue
        # highest affinity first; equal affinity -> lower domain index first
        order = sorted(claimants, key=lambda d: (-state.smoothed[d, e], d))
        for d in order[1:]:
            if len(state.duplications) >= state.max_duplications:
                msg = f"layer {state.layer}: duplication budget reached; expert {e} stays shared with domain {d}"
                state.warnings.append(msg)
                log.debug(msg)
                break
            new = add_expert_copy(layer, e)
            _grow(state, e)
            avail = layer.availability
            avail[:, new] = False
            avail[d, new] = True
            avail[d, e] = False
            state.mask[:, new] = False
            state.mask[d, new] = True
            state.mask[d, e] = False
            state.smoothed[:, new] = 0.0
            state.smoothed[d, new] = state.smoothed[d, e]
            state.smoothed[d, e] = 0.0
            dup = Duplication(state.layer, e, new, int(d), step)
            state.duplications.append(dup)
            actions.append(dup)
    return actions


def token_row_masks(state: AffinityState, token_domains) -> np.ndarray:
    """(tokens x experts) 0/1 matrix M[d_i, e] for token-level gradient filtering."""
    return state.current_mask()[np.asarray(token_domains).reshape(-1)].astype(np.float64)


def expert_gradient_filter(mask: np.ndarray, domain: int, expert_grads: dict[int, list[np.ndarray]]) -> dict:
    """Grouped mode: zero the gradient buffers of experts with ``mask[domain, e] == 0`` (in place)."""
    for e, grads in expert_grads.items():
        if not mask[domain, e]:
            for g in grads:
                if g is not None:
                    g[...] = 0
    return expert_grads


def filter_token_contributions(mask: np.ndarray, token_domains, selected: np.ndarray,
                               contributions: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Mixed mode on explicit per-token gradient contributions.

    ``contributions[e]`` has shape (tokens, ...); the result for expert ``e``
    sums only tokens that selected ``e`` and whose domain may update ``e``.
    """
    token_domains = np.asarray(token_domains).reshape(-1)
    out = {}
    for e, c in contributions.items():
        keep = (selected == e).any(axis=1) & mask[token_domains, e]
        out[e] = c[keep].sum(axis=0) if keep.any() else np.zeros(c.shape[1:], dtype=c.dtype)
    return out


def filter_model_grads(model: MoEModel, states: list[AffinityState], domain: int) -> None:
    """Grouped-mode filter applied to every MoE layer's expert groups."""
    for layer, st in zip(model.layers, states):
        m = st.current_mask()
        grads = {e: [p.grad for p in ex.params()] for e, ex in enumerate(layer.experts)}
        expert_gradient_filter(m, domain, grads)


def overlap_metric(mask: np.ndarray, d1: int, d2: int) -> float:
    """Jaccard overlap of two domains' expert sets (0 when both are empty)."""
    a, b = np.asarray(mask[d1], bool), np.asarray(mask[d2], bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 0.0


def mean_overlap(mask: np.ndarray) -> float:
    """Mean pairwise Jaccard overlap over all domain pairs."""
    d = mask.shape[0]
    vals = [overlap_metric(mask, i, j) for i in range(d) for j in range(i + 1, d)]
    return float(np.mean(vals)) if vals else 0.0


def allowed_experts(states: list[AffinityState], domains) -> list[set[int]]:
    """Per layer, experts whose mask row is set for any of ``domains``."""
    domains = np.atleast_1d(np.asarray(domains))
    return [set(np.nonzero(st.current_mask()[domains].any(axis=0))[0].tolist()) for st in states]


def expert_group(layer: int, e: int) -> str:
    return f"layer.{layer}.{EXPERT}.{e}"


def snapshot_rows(states: list[AffinityState], step: int) -> list[tuple]:
    """(step, layer, domain, expert, A, A_hat, M) rows for CSV export."""
    rows = []
    for st in states:
        a = st.last_fresh if st.last_fresh is not None else st.affinity
        sm = st.smoothed if st.smoothed is not None else np.zeros_like(a)
        m = st.current_mask()
        for d in range(st.num_domains):
            for e in range(st.num_experts):
                rows.append((step, st.layer, d, e, float(a[d, e]), float(sm[d, e]), int(m[d, e])))
    return rows


def snapshot_csv(states: list[AffinityState], step: int, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(["step", "layer", "domain", "expert", "A", "A_hat", "M"])
    for r in snapshot_rows(states, step):
        w.writerow([r[0], r[1], r[2], r[3], f"{r[4]:.6f}", f"{r[5]:.6f}", r[6]])
    return buf.getvalue()
