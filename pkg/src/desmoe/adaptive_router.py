"""Adaptive lightweight router: a GELU MLP distilled from the frozen linear router.

Weights use the row-vector convention ``logits = GELU(h W1 + b1) W2 + b2``
with ``W1`` of shape (d, 4d) and ``W2`` of shape (4d, E).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

DEFAULT_TEMPERATURE = 0.7
# Scale applied to the pretrained router weights copied into the first d rows of W2.
W2_COPY_SCALE = 1.0
GELU_KAIMING_GAIN = np.sqrt(2.0)


class AdaptiveRouter:
    def __init__(self, teacher, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                 temperature: float = DEFAULT_TEMPERATURE):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.teacher = teacher
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.temperature = temperature

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def num_experts(self) -> int:
        return self.w2.shape[1]

    def __call__(self, h: Tensor) -> Tensor:
        return adapt_route(self, h)

    def teacher_logits(self, h: Tensor) -> Tensor:
        return self.teacher.linear_logits(h)

    def add_column(self, source: int) -> None:
        self.w2.data = np.concatenate([self.w2.data, self.w2.data[:, source:source + 1]], axis=1)
        self.b2.data = np.concatenate([self.b2.data, self.b2.data[source:source + 1]])

    @classmethod
    def empty(cls, layer, temperature: float = DEFAULT_TEMPERATURE) -> AdaptiveRouter:
        """Zero-filled router with the right shapes (checkpoint loading)."""
        d, e = layer.router_w.shape
        dt = layer.router_w.dtype
        p = layer.prefix("adaptive")
        mk = lambda shape, n: Tensor(np.zeros(shape, dtype=dt), requires_grad=True, name=f"{p}.{n}")
        return cls(layer, mk((d, 4 * d), "w1"), mk((4 * d,), "b1"), mk((4 * d, e), "w2"), mk((e,), "b2"), temperature)


def init_adaptive_router(layer, seed: int, temperature: float = DEFAULT_TEMPERATURE) -> AdaptiveRouter:
    """Build an adaptive router for ``layer`` and attach it.

    W1 is Kaiming-normal (fan-in d, gain sqrt(2), i.e. std sqrt(2/d)); W2 holds
    the pretrained router weights times ``W2_COPY_SCALE`` in its first d rows
    and zeros below; both biases start at zero.
    """
    w_orig = layer.router_w.data
    if w_orig.ndim != 2 or w_orig.shape[1] != layer.num_experts:
        raise ValueError(f"router weight shape {w_orig.shape} does not match {layer.num_experts} experts")
    d, e = w_orig.shape
    dt = w_orig.dtype
    rng = np.random.default_rng(seed)
    p = layer.prefix("adaptive")
    w1 = rng.normal(0.0, GELU_KAIMING_GAIN / np.sqrt(d), size=(d, 4 * d)).astype(dt)
    w2 = np.zeros((4 * d, e), dtype=dt)
    w2[:d] = W2_COPY_SCALE * w_orig
    router = AdaptiveRouter(
        layer,
        Tensor(w1, requires_grad=True, name=f"{p}.w1"),
        Tensor(np.zeros(4 * d, dtype=dt), requires_grad=True, name=f"{p}.b1"),
        Tensor(w2, requires_grad=True, name=f"{p}.w2"),
        Tensor(np.zeros(e, dtype=dt), requires_grad=True, name=f"{p}.b2"),
        temperature,
    )
    layer.adaptive = router
    return router


def adapt_route(router: AdaptiveRouter, h: Tensor) -> Tensor:
    hidden = nx.gelu(nx.linear(h, router.w1, router.b1))
    return nx.linear(hidden, router.w2, router.b2, columnwise=True)


def kd_loss(router: AdaptiveRouter, h: Tensor) -> Tensor:
    """Token-averaged KL(teacher || student) between temperature-softened routing distributions.

    ``h`` is detached, so the loss only reaches the adaptive router's own
    parameters; the teacher is evaluated without a graph.
    """
    h = h.detach()
    inv_t = 1.0 / router.temperature
    with nx.no_grad():
        p = nx.softmax(router.teacher_logits(h) * inv_t)
    log_q = nx.log_softmax(adapt_route(router, h) * inv_t)
    return nx.kl_divergence(p, log_q)


@dataclass
class BlendSchedule:
    """Distillation weight ``lambda = max(0, 1 - t/T)`` over fine-tuning progress."""
    total_steps: int
    step: int = 0

    @property
    def alpha(self) -> float:
        return min(1.0, max(0.0, self.step / self.total_steps))

    @property
    def weight(self) -> float:
        return blend_weight(self.alpha)


def blend_weight(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return max(0.0, 1.0 - alpha)


def router_loss(kd, task, schedule: BlendSchedule | float):
    """``lambda * kd + (1 - lambda) * task``; works on floats and on Tensors."""
    lam = schedule.weight if isinstance(schedule, BlendSchedule) else blend_weight(schedule)
    return kd * lam + task * (1.0 - lam)
