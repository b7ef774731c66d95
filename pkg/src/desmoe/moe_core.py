"""Toy MoE transformer: embedding, causal attention blocks, routed experts.

Parameters are plain :class:`~desmoe.numerics.Tensor` objects owned by small
container classes.  :meth:`MoEModel.groups` partitions them into named
groups of three kinds (``router``, ``backbone``, ``expert``) which the
schedule and the specialization filter address by name.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

ROUTER, BACKBONE, EXPERT = "router", "backbone", "expert"


@dataclass
class ModelConfig:
    vocab_size: int = 32
    model_dim: int = 16
    num_layers: int = 2
    num_experts: int = 8
    top_k: int = 2
    shared_expert: bool = False
    expert_hidden: int = 32
    attention: bool = True
    max_seq_len: int = 16
    precision: int = 32

    def __post_init__(self):
        for name in ("vocab_size", "model_dim", "num_layers", "num_experts", "expert_hidden", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError("ModelConfig.top_k must lie in [1, num_experts]")
        if self.precision not in (32, 64):
            raise ValueError("ModelConfig.precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _param(rng, shape, std, dtype, name) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, name=name)


def _zeros(shape, dtype, name) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def _ones(shape, dtype, name) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


class FeedForward:
    """Two-layer GELU MLP; one expert (or the shared expert)."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, rng, d, hidden, dtype, prefix) -> FeedForward:
        return cls(
            _param(rng, (d, hidden), 1.0 / np.sqrt(d), dtype, f"{prefix}.w1"),
            _zeros((hidden,), dtype, f"{prefix}.b1"),
            _param(rng, (hidden, d), 1.0 / np.sqrt(hidden), dtype, f"{prefix}.w2"),
            _zeros((d,), dtype, f"{prefix}.b2"),
        )

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self, prefix) -> FeedForward:
        return FeedForward(*(Tensor(p.data.copy(), requires_grad=True, name=f"{prefix}.{p.name.rsplit('.', 1)[1]}")
                             for p in self.params()))

    def __call__(self, u: Tensor, row_mask=None) -> Tensor:
        h = nx.gelu(nx.linear(u, self.w1, self.b1, row_mask=row_mask))
        return nx.linear(h, self.w2, self.b2, row_mask=row_mask)


class MoELayer:
    """Linear softmax router over a growable list of experts.

    ``adaptive`` holds an attached adaptive router; when present it supplies
    the routing logits and the linear router is only a frozen teacher.
    ``availability`` is an optional (domains x experts) boolean matrix used
    for domain-gated routing of duplicated experts during training.
    """

    def __init__(self, index: int, router_w: Tensor, router_b: Tensor, experts: list[FeedForward],
                 top_k: int, shared: FeedForward | None = None):
        self.index = index
        self.top_k = top_k
        self.router_w = router_w
        self.router_b = router_b
        self.experts = experts
        self.shared = shared
        self.adaptive = None
        self.availability: np.ndarray | None = None

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def prefix(self, what: str) -> str:
        return f"layer.{self.index}.{what}"

    def linear_logits(self, u: Tensor) -> Tensor:
        return nx.linear(u, self.router_w, self.router_b, columnwise=True)

    def logits(self, u: Tensor) -> Tensor:
        if self.adaptive is not None:
            return self.adaptive(u)
        return self.linear_logits(u)


def route(layer: MoELayer, u: Tensor, available: np.ndarray | None = None,
          noise: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Router probabilities (softmax over all experts) and the per-token top-k selection.

    ``available`` is an optional (tokens x experts) mask; excluded experts
    get probability 0 and are never selected.  ``noise`` is added to the
    logits (noisy top-k gating, used only while pretraining).
    """
    z = layer.logits(u)
    if noise is not None:
        z = z + Tensor(noise.astype(z.data.dtype))
    probs = nx.softmax(z, where=available, order_invariant=True)
    selected, _ = nx.top_k(probs.detach(), layer.top_k)
    return probs, selected


def moe_forward(layer: MoELayer, u: Tensor, selected: np.ndarray, probs: Tensor,
                row_masks: np.ndarray | None = None) -> Tensor:
    """Weighted sum of the selected experts' outputs, plus the shared expert if any.

    Gates are the softmax probabilities themselves (no renormalisation over
    the selected set).  ``row_masks`` is an optional (tokens x experts) 0/1
    matrix removing individual tokens' contributions to each expert's
    parameter gradients.
    """
    gates = nx.gather(probs, selected)
    outputs, rows = [], []
    for e, expert in enumerate(layer.experts):
        idx = np.nonzero((selected == e).any(axis=1))[0]
        if idx.size == 0:
            outputs.append(None)
            rows.append(None)
            continue
        mask = None if row_masks is None else row_masks[idx, e]
        outputs.append(expert(nx.take_rows(u, idx), mask))
        rows.append(idx)
    out = nx.mixture_combine(gates, selected, outputs, rows)
    if layer.shared is not None:
        out = out + layer.shared(u)
    return out


@dataclass
class RoutingRecord:
    """What one MoE layer did for one forward pass."""
    layer: int
    router_input: Tensor
    probs: np.ndarray
    selected: np.ndarray


@dataclass
class Block:
    attn: dict | None
    ln1: tuple[Tensor, Tensor] | None
    moe: MoELayer
    ln2: tuple[Tensor, Tensor]


class MoEModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c, dt = config, config.dtype
        d = c.model_dim
        self.tok_emb = _param(rng, (c.vocab_size, d), 1.0, dt, "embed.tok")
        self.pos_emb = _param(rng, (c.max_seq_len, d), 0.1, dt, "embed.pos")
        self.blocks: list[Block] = []
        for li in range(c.num_layers):
            p = f"layer.{li}"
            attn = ln1 = None
            if c.attention:
                attn = {k: _param(rng, (d, d), 1.0 / np.sqrt(d), dt, f"{p}.attn.{k}") for k in ("wq", "wk", "wv", "wo")}
                ln1 = (_ones((d,), dt, f"{p}.ln1.g"), _zeros((d,), dt, f"{p}.ln1.b"))
            experts = [FeedForward.init(rng, d, c.expert_hidden, dt, f"{p}.expert.{j}") for j in range(c.num_experts)]
            shared = FeedForward.init(rng, d, c.expert_hidden, dt, f"{p}.shared") if c.shared_expert else None
            layer = MoELayer(li, _param(rng, (d, c.num_experts), 1.0 / np.sqrt(d), dt, f"{p}.router.w"),
                             _zeros((c.num_experts,), dt, f"{p}.router.b"), experts, c.top_k, shared)
            ln2 = (_ones((d,), dt, f"{p}.ln2.g"), _zeros((d,), dt, f"{p}.ln2.b"))
            self.blocks.append(Block(attn, ln1, layer, ln2))
        self.head_w = _param(rng, (d, c.vocab_size), 1.0 / np.sqrt(d), dt, "head.w")
        self.head_b = _zeros((c.vocab_size,), dt, "head.b")

    @property
    def layers(self) -> list[MoELayer]:
        return [b.moe for b in self.blocks]

    # -- parameter bookkeeping --------------------------------------------------

    def groups(self) -> dict[str, tuple[str, list[Tensor]]]:
        """Ordered mapping group name -> (kind, tensors); a total, disjoint partition."""
        g: dict[str, tuple[str, list[Tensor]]] = {"embed": (BACKBONE, [self.tok_emb, self.pos_emb])}
        for b in self.blocks:
            m = b.moe
            if b.attn is not None:
                g[m.prefix("attn")] = (BACKBONE, list(b.attn.values()))
                g[m.prefix("ln1")] = (BACKBONE, list(b.ln1))
            g[m.prefix("router")] = (ROUTER, [m.router_w, m.router_b])
            if m.adaptive is not None:
                g[m.prefix("adaptive_router")] = (ROUTER, m.adaptive.params())
            for j, ex in enumerate(m.experts):
                g[m.prefix(f"expert.{j}")] = (EXPERT, ex.params())
            if m.shared is not None:
                g[m.prefix("shared")] = (BACKBONE, m.shared.params())
            g[m.prefix("ln2")] = (BACKBONE, list(b.ln2))
        g["head"] = (BACKBONE, [self.head_w, self.head_b])
        return g

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for _, ts in self.groups().values() for t in ts}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def routing_groups(self) -> list[str]:
        """Router groups currently producing routing logits."""
        return [m.prefix("adaptive_router" if m.adaptive is not None else "router") for m in self.layers]

    def set_precision(self, precision: int) -> None:
        dt = np.float32 if precision == 32 else np.float64
        self.config.precision = precision
        for t in self.parameters().values():
            t.data = t.data.astype(dt)


def model_forward(model: MoEModel, ids, token_domains: np.ndarray | None = None,
                  row_masks: list[np.ndarray] | None = None,
                  router_noise: tuple[np.random.Generator, float] | None = None) -> tuple[Tensor, list[RoutingRecord]]:
    """Logits (B*S x vocab) for a (B x S) id array, plus one routing record per MoE layer.

    ``token_domains`` (flattened per-token domain ids) switches on domain-gated
    availability for layers that carry an availability matrix; leave it as
    ``None`` for label-free evaluation.  ``row_masks`` gives per-layer
    (tokens x experts) gradient masks for token-level expert filtering.
    ``router_noise = (rng, std)`` adds Gaussian noise to every router's logits.
    """
    cfg = model.config
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    bsz, seq = ids.shape
    if seq > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    d = cfg.model_dim
    x = nx.embedding_lookup(model.tok_emb, ids) + nx.embedding_lookup(model.pos_emb, np.arange(seq))
    x = x.reshape(bsz * seq, d)
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    records = []
    for li, blk in enumerate(model.blocks):
        if blk.attn is not None:
            a = blk.attn
            q = nx.linear(x, a["wq"]).reshape(bsz, seq, d)
            k = nx.linear(x, a["wk"]).reshape(bsz, seq, d)
            v = nx.linear(x, a["wv"]).reshape(bsz, seq, d)
            att = nx.softmax(nx.matmul(q, k.T) * (1.0 / np.sqrt(d)), where=causal)
            o = nx.linear(nx.matmul(att, v).reshape(bsz * seq, d), a["wo"])
            x = nx.layer_norm(x + o, *blk.ln1)
        layer = blk.moe
        available = None
        if token_domains is not None and layer.availability is not None:
            available = layer.availability[np.asarray(token_domains)]
        noise = None
        if router_noise is not None:
            rng, std = router_noise
            noise = rng.normal(0.0, std, size=(x.shape[0], layer.num_experts))
        probs, selected = route(layer, x, available, noise)
        records.append(RoutingRecord(li, x, probs.data, selected))
        y = moe_forward(layer, x, selected, probs, None if row_masks is None else row_masks[li])
        x = nx.layer_norm(x + y, *blk.ln2)
    return nx.linear(x, model.head_w, model.head_b), records


def add_expert_copy(layer: MoELayer, source: int) -> int:
    """Append a bit-identical copy of expert ``source``; routers gain a copied column."""
    if not 0 <= source < layer.num_experts:
        raise ValueError(f"expert {source} does not exist in layer {layer.index}")
    new = layer.num_experts
    layer.experts.append(layer.experts[source].copy(layer.prefix(f"expert.{new}")))
    layer.router_w.data = np.concatenate([layer.router_w.data, layer.router_w.data[:, source:source + 1]], axis=1)
    layer.router_b.data = np.concatenate([layer.router_b.data, layer.router_b.data[source:source + 1]])
    if layer.adaptive is not None:
        layer.adaptive.add_column(source)
    if layer.availability is not None:
        layer.availability = np.concatenate([layer.availability, layer.availability[:, source:source + 1]], axis=1)
    return new


# -- checkpoint container -----------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"DESMOECK"
#   uint32    format version (1)
#   uint64    header length H
#   H bytes   UTF-8 JSON header: config echo, per-layer structure, and for
#             every tensor its name, shape, dtype ("<f4"/"<f8"), offset, nbytes
#   ...       raw tensor payloads, offsets relative to the end of the header

MAGIC = b"DESMOECK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: MoEModel, path, extra: dict | None = None) -> None:
    params = model.parameters()
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        dt = "<f4" if t.dtype == np.float32 else "<f8"
        raw = np.ascontiguousarray(t.data, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    layers = []
    for m in model.layers:
        info = {"num_experts": m.num_experts, "adaptive": None,
                "availability": None if m.availability is None else m.availability.astype(int).tolist()}
        if m.adaptive is not None:
            info["adaptive"] = {"temperature": m.adaptive.temperature}
        layers.append(info)
    header = {
        "format": "desmoe-checkpoint",
        "precision": model.config.precision,
        "config": dataclasses.asdict(model.config),
        "layers": layers,
        "tensors": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(20)
        if len(head) < 20 or head[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a desmoe checkpoint")
        version, hlen = struct.unpack("<IQ", head[8:])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(f.read(hlen).decode("utf-8"))


def load_checkpoint(path) -> tuple[MoEModel, dict]:
    """Rebuild a model (including duplicated experts and adaptive routers)."""
    from .adaptive_router import AdaptiveRouter

    path = Path(path)
    raw = path.read_bytes()
    header = read_checkpoint_header(path)
    base = 20 + struct.unpack("<Q", raw[12:20])[0]
    config = ModelConfig.from_dict(header["config"])
    model = MoEModel(config, seed=0)
    for m, info in zip(model.layers, header["layers"]):
        while m.num_experts < info["num_experts"]:
            add_expert_copy(m, 0)
        if info["adaptive"] is not None:
            m.adaptive = AdaptiveRouter.empty(m, info["adaptive"]["temperature"])
        if info["availability"] is not None:
            m.availability = np.array(info["availability"], dtype=bool)
    params = model.parameters()
    names = {e["name"] for e in header["tensors"]}
    if names != set(params):
        raise CheckpointError(f"{path}: tensor set does not match the configured model")
    for e in header["tensors"]:
        t = params[e["name"]]
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=base + e["offset"]).reshape(e["shape"])
        t.data = arr.astype(config.dtype)
    return model, header.get("extra", {})
