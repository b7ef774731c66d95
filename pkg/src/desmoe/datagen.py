"""Deterministic synthetic multi-domain sequence tasks.

Every example is ``[task marker] x_1..x_n [SEP] y_1..y_m`` laid out for
next-token prediction: ``inputs = seq[:-1]`` and ``targets = seq[1:]`` with
everything except the answer positions set to ``IGNORE``.  Example ``i`` of a
domain is a pure function of ``(seed, domain kind, i)``; evaluation suites use
indices below ``TRAIN_OFFSET`` and training batches indices above it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .moe_core import MoEModel, model_forward

PAD, SEP = 0, 1
IGNORE = -1
SEQ_LEN = 16
VOCAB_SIZE = 32
FIRST_SYMBOL = 12
NUM_SYMBOLS = VOCAB_SIZE - FIRST_SYMBOL
TRAIN_OFFSET = 1 << 20

TASK_KINDS = ("copy", "reverse", "modular-add", "sort", "parity", "pattern-fill")
GENERAL_KIND = "lookup"
MARKERS = {k: 2 + i for i, k in enumerate(TASK_KINDS + (GENERAL_KIND,))}
_KIND_CODE = {k: i for i, k in enumerate(TASK_KINDS + (GENERAL_KIND,))}

# symbol slice and input length range per task kind
DEFAULT_SLICES = {
    "copy": ((0, 10), (3, 6)),
    "reverse": ((10, 20), (3, 6)),
    "modular-add": ((0, 10), (2, 4)),
    "sort": ((5, 15), (3, 6)),
    "parity": ((0, 2), (3, 8)),
    "pattern-fill": ((10, 20), (2, 3)),
    GENERAL_KIND: ((0, 20), (2, 5)),
}
MODULUS = 10
WORLD_SEED = 20240917


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    kind: str
    symbols: tuple[int, int] = None
    lengths: tuple[int, int] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise ValueError(f"unknown task kind {self.kind!r}")
        sym, lens = DEFAULT_SLICES[self.kind]
        if self.symbols is None:
            object.__setattr__(self, "symbols", sym)
        if self.lengths is None:
            object.__setattr__(self, "lengths", lens)
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "lengths", tuple(self.lengths))
        lo, hi = self.symbols
        if not 0 <= lo < hi <= NUM_SYMBOLS:
            raise ValueError(f"symbol slice {self.symbols} outside [0, {NUM_SYMBOLS}]")
        if self.kind == "modular-add" and hi - lo < MODULUS:
            raise ValueError("modular-add needs at least 10 symbols")
        if self.lengths[0] < 1 or self.lengths[0] > self.lengths[1]:
            raise ValueError(f"bad length range {self.lengths}")
        if max_tokens(self.kind, self.lengths[1]) > SEQ_LEN + 1:
            raise ValueError(f"{self.kind} examples of length {self.lengths[1]} exceed {SEQ_LEN} tokens")

    @property
    def marker(self) -> int:
        return MARKERS[self.kind]

    def to_dict(self) -> dict:
        return {"domain_id": self.domain_id, "kind": self.kind, "symbols": list(self.symbols),
                "lengths": list(self.lengths), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> DomainSpec:
        unknown = set(d) - {"domain_id", "kind", "symbols", "lengths", "seed"}
        if unknown:
            raise ValueError(f"unknown domain keys: {sorted(unknown)}")
        return cls(**d)


def default_domains(n: int = 6, seed: int = 0) -> list[DomainSpec]:
    if not 1 <= n <= len(TASK_KINDS):
        raise ValueError(f"between 1 and {len(TASK_KINDS)} domains are available")
    return [DomainSpec(i, kind, seed=seed) for i, kind in enumerate(TASK_KINDS[:n])]


def general_spec(seed: int = 0) -> DomainSpec:
    """The held-out 'general ability' task: recall of a fixed symbol-to-symbol table."""
    return DomainSpec(-1, GENERAL_KIND, seed=seed)


def _lookup_table() -> np.ndarray:
    return np.random.default_rng(WORLD_SEED).permutation(NUM_SYMBOLS)


_TABLE = _lookup_table()


def max_tokens(kind: str, n: int) -> int:
    """Longest encoded example (marker and separator included) for input length ``n``."""
    if kind in ("modular-add", "parity"):
        return n + 3
    if kind == "pattern-fill":
        return 4 * n + 1
    return 2 * n + 2


def _solve(kind: str, x: list[int]) -> list[int]:
    if kind == "copy":
        return list(x)
    if kind == "reverse":
        return list(x[::-1])
    if kind == "modular-add":
        return [sum(x) % MODULUS]
    if kind == "sort":
        return sorted(x)
    if kind == "parity":
        return [sum(x) % 2]
    if kind == GENERAL_KIND:
        return [int(_TABLE[v]) for v in x]
    raise ValueError(kind)


def make_example(spec: DomainSpec, index: int) -> tuple[list[int], list[int]]:
    """Symbol-level (input, answer) pair; symbols are offsets into the content range."""
    rng = np.random.default_rng([spec.seed, _KIND_CODE[spec.kind], index])
    lo, hi = spec.symbols
    n = int(rng.integers(spec.lengths[0], spec.lengths[1] + 1))
    if spec.kind == "modular-add":
        x = rng.integers(lo, lo + MODULUS, size=n)
        x = [int(v) - lo for v in x]
        return [v + lo for v in x], [_solve(spec.kind, x)[0] + lo]
    if spec.kind == "parity":
        x = [int(v) for v in rng.integers(0, 2, size=n)]
        return [v + lo for v in x], [_solve(spec.kind, x)[0] + lo]
    if spec.kind == "pattern-fill":
        base = [int(v) for v in rng.integers(lo, hi, size=n)]
        shown = base * 2 + base[: int(rng.integers(0, n))]
        cont = (base * 3)[len(shown): len(shown) + n]
        return shown, cont
    x = [int(v) for v in rng.integers(lo, hi, size=n)]
    return x, _solve(spec.kind, x)


def encode(spec: DomainSpec, x: list[int], y: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and next-token targets (answer positions only), padded to ``SEQ_LEN``."""
    seq = [spec.marker] + [FIRST_SYMBOL + v for v in x] + [SEP] + [FIRST_SYMBOL + v for v in y]
    inputs = np.full(SEQ_LEN, PAD, dtype=np.int64)
    targets = np.full(SEQ_LEN, IGNORE, dtype=np.int64)
    inputs[: len(seq) - 1] = seq[:-1]
    start = len(x) + 1
    targets[start: len(seq) - 1] = seq[start + 1:]
    return inputs, targets


@dataclass
class DomainBatch:
    inputs: np.ndarray
    targets: np.ndarray
    domains: np.ndarray
    mixed: bool = False

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape or self.domains.shape != self.inputs.shape[:1]:
            raise ValueError("batch arrays disagree in shape")
        if not self.mixed and self.domains.size and (self.domains != self.domains[0]).any():
            raise ValueError("grouped batches carry a single domain")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def token_domains(self) -> np.ndarray:
        return np.repeat(self.domains, self.inputs.shape[1])

    @property
    def domain(self) -> int:
        return int(self.domains[0])

    def subset(self, rows) -> DomainBatch:
        rows = np.asarray(rows)
        return DomainBatch(self.inputs[rows], self.targets[rows], self.domains[rows],
                           mixed=len(np.unique(self.domains[rows])) > 1)

    def tobytes(self) -> bytes:
        return self.inputs.tobytes() + self.targets.tobytes() + self.domains.tobytes()


def _label(spec: DomainSpec) -> int:
    return max(spec.domain_id, 0)


def sample_batch(specs, step: int, batch_size: int, mode: str = "grouped") -> DomainBatch:
    """Training batch for ``step``.

    ``grouped`` draws every sequence from a single spec (``specs`` may be one
    spec, or a list from which ``step mod len`` picks); ``mixed`` interleaves
    all specs round-robin, so each sequence carries its own domain label.
    """
    if isinstance(specs, DomainSpec):
        specs = [specs]
    if mode not in ("grouped", "mixed"):
        raise ValueError(f"unknown batch mode {mode!r}")
    rows_in, rows_tg, labels = [], [], []
    for i in range(batch_size):
        if mode == "grouped":
            spec = specs[step % len(specs)]
            index = TRAIN_OFFSET + (step // len(specs)) * batch_size + i
        else:
            spec = specs[i % len(specs)]
            index = TRAIN_OFFSET + step * batch_size + i
        a, b = encode(spec, *make_example(spec, index))
        rows_in.append(a)
        rows_tg.append(b)
        labels.append(_label(spec))
    return DomainBatch(np.stack(rows_in), np.stack(rows_tg), np.array(labels, dtype=np.int64), mixed=mode == "mixed")


@dataclass
class EvalSuite:
    """Frozen (inputs, targets) arrays per named domain."""
    items: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.items)

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for name, (inp, tgt) in self.items.items():
                for a, b in zip(inp, tgt):
                    f.write(json.dumps({"domain": name, "inputs": a.tolist(), "targets": b.tolist()}) + "\n")


def suite_name(spec: DomainSpec) -> str:
    return "general" if spec.kind == GENERAL_KIND else f"{spec.domain_id}:{spec.kind}"


def build_suite(specs, size: int = 128) -> EvalSuite:
    if size > TRAIN_OFFSET:
        raise ValueError("evaluation suite would overlap the training index range")
    suite = EvalSuite()
    for spec in specs:
        pairs = [encode(spec, *make_example(spec, i)) for i in range(size)]
        suite.items[suite_name(spec)] = (np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
    return suite


def predictions(model: MoEModel, inputs: np.ndarray) -> np.ndarray:
    """Greedy argmax next-token predictions, shape (B, S)."""
    with nx.no_grad():
        logits, _ = model_forward(model, inputs)
    return logits.data.argmax(axis=1).reshape(inputs.shape)


def exact_match(pred: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of sequences whose every answer position is predicted correctly."""
    answer = targets != IGNORE
    ok = ((pred == targets) | ~answer).all(axis=1)
    return float(ok.mean())


def exact_match_eval(model: MoEModel, suite: EvalSuite, chunk: int = 256) -> dict[str, float]:
    """Per-domain exact-match accuracy.

    Teacher-forced argmax at every answer position equals greedy decoding
    whenever the whole answer is right, so one forward pass per chunk suffices.
    """
    out = {}
    for name, (inp, tgt) in suite.items.items():
        pred = np.concatenate([predictions(model, inp[i:i + chunk]) for i in range(0, len(inp), chunk)])
        out[name] = exact_match(pred, tgt)
    return out
