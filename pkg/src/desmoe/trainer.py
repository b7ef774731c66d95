"""Fine-tuning loop: loss assembly, masked optimizer steps, specialization upkeep, baselines."""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .adaptive_router import BlendSchedule, init_adaptive_router, kd_loss
from .datagen import DomainBatch, DomainSpec, EvalSuite, build_suite, exact_match_eval, general_spec, sample_batch
from .moe_core import EXPERT, ROUTER, MoEModel, ModelConfig, model_forward
from .schedule import Phase, PhasePlan, phase_of, update_mask
from .specialization import (AffinityState, accumulate_affinity, allowed_experts, ema_refresh, filter_model_grads,
                             mean_overlap, resolve_shared_experts, token_row_masks)

log = logging.getLogger(__name__)

DES_MOE, FFT, STATIC_ESFT = "des-moe", "fft", "static-esft"
POLICIES = (DES_MOE, FFT, STATIC_ESFT)


@dataclass
class TrainConfig:
    policy: str = DES_MOE
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 500
    t_update: int = 50
    warmup_frac: float = 0.2
    stabilize_frac: float = 0.7
    phi: float = 0.6
    ema_weight: float = 0.9
    temperature: float = 0.7
    seed: int = 0
    batch_size: int = 32
    mixed_batches: bool = False
    duplication_cap: int = 4
    precision: int = 32
    eval_interval: int = 100
    eval_size: int = 64
    experts_in_warmup: bool = False
    esft_fraction: float = 0.25
    esft_probe_batches: int = 4
    expert_filter: bool = True  # False disables both the per-domain gradient filter and expert copies
    router_lr_scale: float = 10.0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        for name in ("lr", "total_steps", "t_update", "batch_size", "eval_interval", "temperature", "eval_size",
                     "router_lr_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if not 0 < self.phi <= 1 or not 0 < self.ema_weight <= 1 or not 0 < self.esft_fraction <= 1:
            raise ValueError("phi, ema_weight and esft_fraction must lie in (0, 1]")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.duplication_cap < 0:
            raise ValueError("duplication_cap must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def plan(self) -> PhasePlan:
        return PhasePlan.from_fractions(self.total_steps, self.warmup_frac, self.stabilize_frac)


class Optimizer:
    """Adam (or plain SGD) that only touches the parameters it is told to.

    Parameters outside the allowed set keep both their values and their
    moment estimates, so a frozen group is bit-identical across a step.
    """

    def __init__(self, lr: float, kind: str = "adam", beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.kind = lr, kind
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, nx.Tensor], allowed: set[str] | None = None,
             lr_scale: dict[str, float] | None = None) -> int:
        updated = 0
        for name, p in params.items():
            if p.grad is None or (allowed is not None and name not in allowed):
                continue
            g = p.grad
            lr = self.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
            if self.kind == "sgd":
                if self.weight_decay:
                    p.data -= lr * self.weight_decay * p.data
                p.data -= lr * g
            else:
                st = self.state.get(name)
                if st is None:
                    st = self.state[name] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                st["t"] += 1
                st["m"] *= self.beta1
                st["m"] += (1 - self.beta1) * g
                st["v"] *= self.beta2
                st["v"] += (1 - self.beta2) * g * g
                mhat = st["m"] / (1 - self.beta1 ** st["t"])
                vhat = st["v"] / (1 - self.beta2 ** st["t"])
                if self.weight_decay:
                    p.data -= lr * self.weight_decay * p.data
                p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            updated += 1
        return updated

    def copy_state(self, src: str, dst: str) -> None:
        if src in self.state:
            self.state[dst] = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.state[src].items()}

    def extend_columns(self, name: str, source: int) -> None:
        st = self.state.get(name)
        if st is None:
            return
        for k in ("m", "v"):
            a = st[k]
            st[k] = np.concatenate([a, a[..., source:source + 1]], axis=-1)


def task_loss(model: MoEModel, batch: DomainBatch, token_domains=None, row_masks=None):
    """Mean next-token cross-entropy over answer positions; returns (loss, routing records)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits, records = model_forward(model, batch.inputs, token_domains=token_domains, row_masks=row_masks)
    return nx.cross_entropy(logits, batch.targets.reshape(-1)), records


def des_objective(model: MoEModel, batch: DomainBatch, lam: float, token_domains=None, row_masks=None):
    """``task + (lam * kd + (1 - lam) * task)`` with the KD term averaged over MoE layers.

    Returns (total, task, kd, routing records).  Every layer must carry an adaptive router.
    """
    task, records = task_loss(model, batch, token_domains=token_domains, row_masks=row_masks)
    kd = None
    for m, rec in zip(model.layers, records):
        if m.adaptive is None:
            raise ValueError(f"layer {m.index} has no adaptive router")
        term = kd_loss(m.adaptive, rec.router_input)
        kd = term if kd is None else kd + term
    kd = kd * (1.0 / len(records))
    return task + (kd * lam + task * (1.0 - lam)), task, kd, records


@dataclass
class MetricsRecord:
    step: int
    phase: str
    loss: float
    task_loss: float
    kd_loss: float
    blend: float
    trainable_fraction: float
    overlap: float
    accuracy: dict[str, float] = field(default_factory=dict)

    def row(self, names: list[str]) -> list:
        return [self.step, self.phase, f"{self.loss:.6f}", f"{self.task_loss:.6f}", f"{self.kd_loss:.6f}",
                f"{self.blend:.6f}", f"{self.trainable_fraction:.6f}", f"{self.overlap:.6f}"] + \
               [f"{self.accuracy.get(n, float('nan')):.6f}" for n in names]


METRIC_COLUMNS = ["step", "phase", "loss", "task_loss", "kd_loss", "lambda", "trainable_fraction", "overlap"]


def metrics_csv(records: list[MetricsRecord]) -> str:
    names = sorted({n for r in records for n in r.accuracy})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS + [f"acc[{n}]" for n in names])
    for r in records:
        w.writerow(r.row(names))
    return buf.getvalue()


class Trainer:
    """Owns a model being fine-tuned and everything that mutates it."""

    def __init__(self, model: MoEModel, domains: list[DomainSpec], config: TrainConfig,
                 eval_suite: EvalSuite | None = None):
        if not domains:
            raise ValueError("at least one domain is required")
        self.model = model
        self.domains = domains
        self.config = config
        self.plan = config.plan()
        self.eval_suite = eval_suite
        self.events: list[dict] = []
        self.records: list[MetricsRecord] = []
        self.snapshots: list[str] = []
        self.opt = Optimizer(config.lr, config.optimizer, config.beta1, config.beta2, config.eps, config.weight_decay)
        self.blend = BlendSchedule(config.total_steps)
        self._phase = None
        nd = len(domains)
        self.states = [AffinityState(nd, m.num_experts, layer=m.index, phi=config.phi, ema_weight=config.ema_weight,
                                     max_duplications=config.duplication_cap) for m in model.layers]
        self.esft_sets = None
        if config.policy == DES_MOE:
            for m in model.layers:
                if m.adaptive is None:
                    init_adaptive_router(m, seed=config.seed * 1000 + m.index, temperature=config.temperature)
        else:
            for m in model.layers:
                m.adaptive = None
        if config.policy == STATIC_ESFT:
            self.esft_sets = self._esft_prepass()

    # -- helpers --------------------------------------------------------------------

    def _esft_prepass(self) -> list[list[set[int]]]:
        """Per domain, per layer: the top ceil(fraction * E) experts by affinity under the original router."""
        cfg = self.config
        probe = [AffinityState(len(self.domains), m.num_experts, layer=m.index) for m in self.model.layers]
        for spec_i, spec in enumerate(self.domains):
            for b in range(cfg.esft_probe_batches):
                batch = sample_batch(spec, -(b + 1) * len(self.domains), cfg.batch_size)
                with nx.no_grad():
                    _, records = model_forward(self.model, batch.inputs)
                for st, rec in zip(probe, records):
                    accumulate_affinity(st, rec.selected, np.full(rec.selected.shape[0], spec_i))
        sets = []
        for d in range(len(self.domains)):
            per_layer = []
            for st in probe:
                a = st.affinity[d]
                k = math.ceil(cfg.esft_fraction * st.num_experts)
                per_layer.append(set(np.argsort(-a, kind="stable")[:k].tolist()))
            sets.append(per_layer)
        self.events.append({"step": 0, "event": "esft_selection",
                            "experts": [[sorted(s) for s in per] for per in sets]})
        return sets

    def groups(self) -> dict[str, str]:
        return {name: kind for name, (kind, _) in self.model.groups().items()}

    def allowed_groups(self, t: int, batch: DomainBatch) -> frozenset[str]:
        cfg = self.config
        groups = self.groups()
        present = np.unique(batch.domains)
        if cfg.policy == FFT:
            return frozenset(groups)
        if cfg.policy == STATIC_ESFT:
            names = set()
            for d in present:
                for li, es in enumerate(self.esft_sets[d]):
                    names |= {f"layer.{li}.{EXPERT}.{e}" for e in es}
            return frozenset(names)
        if cfg.expert_filter:
            experts = allowed_experts(self.states, present)
        else:
            experts = [set(range(m.num_experts)) for m in self.model.layers]
        return update_mask(self.plan, t, groups, self.model.routing_groups(), experts, cfg.experts_in_warmup)

    def trainable_fraction(self, allowed) -> float:
        total = self.model.num_parameters()
        n = sum(t.size for name, (_, ts) in self.model.groups().items() if name in allowed for t in ts)
        return n / total

    def _refresh(self, t: int) -> None:
        for st in self.states:
            ema_refresh(st)
        self.snapshots.append(_snapshot(self.states, t))
        if self.config.expert_filter and t >= self.plan.t1:
            for st, layer in zip(self.states, self.model.layers):
                for dup in resolve_shared_experts(st, layer, step=t):
                    self._on_duplicate(layer, dup)
        for st in self.states:
            for w in st.warnings:
                self.events.append({"step": t, "event": "warning", "layer": st.layer, "message": w})
            st.warnings.clear()

    def _on_duplicate(self, layer, dup) -> None:
        src, new = layer.prefix(f"expert.{dup.source}"), layer.prefix(f"expert.{dup.copy}")
        for a, b in zip(layer.experts[dup.source].params(), layer.experts[dup.copy].params()):
            self.opt.copy_state(a.name, b.name)
        for t in (layer.router_w, layer.router_b):
            self.opt.extend_columns(t.name, dup.source)
        if layer.adaptive is not None:
            for t in (layer.adaptive.w2, layer.adaptive.b2):
                self.opt.extend_columns(t.name, dup.source)
        self.events.append({"step": dup.step, "event": "duplicate", "layer": dup.layer, "source": src,
                            "copy": new, "domain": dup.domain})

    # -- the step ---------------------------------------------------------------------

    def train_step(self, batch: DomainBatch, t: int) -> MetricsRecord:
        cfg, model = self.config, self.model
        if not 1 <= t <= cfg.total_steps:
            raise ValueError(f"step {t} outside [1, {cfg.total_steps}]")
        phase = phase_of(self.plan, t) if cfg.policy == DES_MOE else Phase.CONSOLIDATION
        des = cfg.policy == DES_MOE
        tok_dom = batch.token_domains
        row_masks = None
        if des and cfg.expert_filter and batch.mixed:
            row_masks = [token_row_masks(st, tok_dom) for st in self.states]

        model.zero_grad()
        self.blend.step = t
        lam = self.blend.weight if des else 0.0
        try:
            if des:
                loss, task, kd, records = des_objective(model, batch, lam, token_domains=tok_dom,
                                                        row_masks=row_masks)
                kd_value = kd.item()
            else:
                task, records = task_loss(model, batch)
                loss, kd_value = task, 0.0
            if not np.isfinite(loss.item()):
                raise nx.NumericError(f"non-finite loss at step {t} (task={task.item()!r}, kd={kd_value!r})")
        except nx.NumericError as exc:
            self.events.append({"step": t, "event": "numeric_failure", "message": str(exc)})
            raise
        loss.backward()

        if des and cfg.expert_filter and not batch.mixed:
            filter_model_grads(model, self.states, batch.domain)
        allowed = self.allowed_groups(t, batch)
        params, scale = {}, {}
        for name, (kind, ts) in model.groups().items():
            if name in allowed:
                params.update({p.name: p for p in ts})
                # only the freshly initialised adaptive router gets the scaled rate
                if kind == ROUTER and name.endswith("adaptive_router") and cfg.router_lr_scale != 1.0:
                    scale.update({p.name: cfg.router_lr_scale for p in ts})
        self.opt.step(params, lr_scale=scale)

        if des:
            for st, rec in zip(self.states, records):
                accumulate_affinity(st, rec.selected, tok_dom)
            if t % cfg.t_update == 0 or t == self.plan.t1:
                self._refresh(t)

        frac = self.trainable_fraction(allowed)
        if phase != self._phase and des:
            self.events.append({"step": t, "event": "phase", "phase": phase.value,
                                "trainable_parameters": int(round(frac * model.num_parameters()))})
        self._phase = phase
        overlap = float(np.mean([mean_overlap(st.current_mask()) for st in self.states])) if des else 0.0
        return MetricsRecord(t, phase.value, loss.item(), task.item(), kd_value, lam, frac, overlap)

    def run(self) -> list[MetricsRecord]:
        cfg = self.config
        for t in range(1, cfg.total_steps + 1):
            batch = self.batch(t)
            rec = self.train_step(batch, t)
            if t % cfg.eval_interval == 0:
                if self.eval_suite is not None:
                    rec.accuracy = exact_match_eval(self.model, self.eval_suite)
                self.records.append(rec)
        return self.records

    def batch(self, t: int) -> DomainBatch:
        cfg = self.config
        mode = "mixed" if cfg.mixed_batches else "grouped"
        # the seed shifts the data stream; step indices stay 0-based
        return sample_batch(self.domains, t - 1 + cfg.seed * 100003, cfg.batch_size, mode)

    def final_overlap(self) -> float:
        return float(np.mean([mean_overlap(st.current_mask()) for st in self.states]))


def _snapshot(states, t):
    from .specialization import snapshot_csv
    return snapshot_csv(states, t, header=False)


def run_finetune(pretrained, domains: list[DomainSpec], config: TrainConfig,
                 eval_suite: EvalSuite | None = None) -> tuple[MoEModel, Trainer]:
    """Fine-tune a copy of ``pretrained`` (a model or a checkpoint path) for ``config.total_steps`` steps."""
    from .moe_core import load_checkpoint

    if isinstance(pretrained, MoEModel):
        model = copy.deepcopy(pretrained)
    else:
        model, _ = load_checkpoint(pretrained)
    if model.config.precision != config.precision:
        model.set_precision(config.precision)
    if eval_suite is None:
        eval_suite = build_suite(list(domains) + [general_spec(domains[0].seed)], config.eval_size)
    trainer = Trainer(model, list(domains), config, eval_suite)
    trainer.run()
    return model, trainer


# -- pretraining ------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 2500
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    general_weight: int = 3
    router_noise: float = 2.0
    eval_interval: int = 100
    eval_size: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> PretrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


def pretrain_mixture(domains: list[DomainSpec], general_weight: int = 3) -> list[DomainSpec]:
    """All domains plus ``general_weight`` interleaved slots of the general task."""
    gen = general_spec(domains[0].seed if domains else 0)
    mix: list[DomainSpec] = []
    for i, d in enumerate(domains):
        mix.append(d)
        if i < general_weight:
            mix.append(gen)
    while mix.count(gen) < general_weight:
        mix.append(gen)
    return mix


def pretrain(model_config: ModelConfig, domains: list[DomainSpec], config: PretrainConfig,
             eval_suite: EvalSuite | None = None) -> tuple[MoEModel, list[MetricsRecord]]:
    """Train the base model on the all-domain mixture plus the general task (every group trainable)."""
    model = MoEModel(model_config, seed=config.seed)
    opt = Optimizer(config.lr)
    mix = pretrain_mixture(domains, config.general_weight)
    noise_rng = np.random.default_rng([config.seed, 7])
    records = []
    for t in range(1, config.steps + 1):
        batch = sample_batch(mix, t - 1 + config.seed * 100003, config.batch_size, "mixed")
        model.zero_grad()
        noise = (noise_rng, config.router_noise) if config.router_noise > 0 else None
        logits, _ = model_forward(model, batch.inputs, router_noise=noise)
        loss = nx.cross_entropy(logits, batch.targets.reshape(-1))
        if not np.isfinite(loss.item()):
            raise nx.NumericError(f"non-finite pretraining loss at step {t}")
        loss.backward()
        opt.step(model.parameters())
        if t % config.eval_interval == 0:
            rec = MetricsRecord(t, "pretrain", loss.item(), loss.item(), 0.0, 0.0, 1.0, 0.0)
            if eval_suite is not None:
                rec.accuracy = exact_match_eval(model, eval_suite)
            records.append(rec)
    return model, records


# -- forgetting measurement -----------------------------------------------------------------


def forgetting_report(before: dict[str, float], after: dict[str, float], names=None) -> dict:
    """Per-domain ``after - before`` and the mean ``after / before`` retention."""
    names = list(before) if names is None else list(names)
    if set(before) != set(after) or not set(names) <= set(before):
        raise ValueError("before/after metrics come from different evaluation suites")
    deltas = {n: after[n] - before[n] for n in names}
    ratios = [after[n] / before[n] for n in names if before[n] > 0]
    return {"deltas": deltas, "retention": float(np.mean(ratios)) if ratios else float("nan")}


def sweep_domains(pretrained: MoEModel, domains: list[DomainSpec], base: TrainConfig, steps_per_domain: int,
                  policies=POLICIES, n_min: int = 2, n_max: int = 6, general_size: int = 128) -> list[dict]:
    """Fine-tune on the first N domains for N in [n_min, n_max]; report general-suite retention.

    The step budget grows with N (``steps_per_domain * N``) so every domain
    gets the same amount of training.
    """
    if len(domains) < n_max:
        raise ValueError(f"sweep up to N={n_max} needs {n_max} domain specs, got {len(domains)}")
    if not 1 <= n_min <= n_max:
        raise ValueError("need 1 <= n_min <= n_max")
    gen_suite = build_suite([general_spec(domains[0].seed)], general_size)
    before = exact_match_eval(pretrained, gen_suite)
    rows = []
    for n in range(n_min, n_max + 1):
        for policy in policies:
            cfg = dataclasses.replace(base, policy=policy, total_steps=steps_per_domain * n,
                                      eval_interval=steps_per_domain * n)
            model, trainer = run_finetune(pretrained, domains[:n], cfg, eval_suite=EvalSuite())
            after = exact_match_eval(model, gen_suite)
            rep = forgetting_report(before, after)
            rows.append({"n": n, "policy": policy, "seed": base.seed, "before": before["general"],
                         "after": after["general"], "retention": rep["retention"],
                         "overlap": trainer.final_overlap() if policy == DES_MOE else float("nan")})
    return rows
