"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  ``Tensor.backward``
sorts the recorded graph topologically (the "tape") and replays the
closures in reverse, visiting each node once.

Only the handful of ops the MoE model needs are provided.  Gradients are
allocated lazily, and tensors created with ``requires_grad=False`` (or via
:meth:`Tensor.detach`) never accumulate anything.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class NumericError(ArithmeticError):
    """NaN or infinite values reached an op that forbids them."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _dtype(precision) -> np.dtype:
    if precision in (32, "32", "float32", np.float32):
        return np.dtype(np.float32)
    if precision in (64, "64", "float64", np.float64):
        return np.dtype(np.float64)
    raise ValueError(f"unsupported precision {precision!r}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.array(data, dtype=_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph traversal ----------------------------------------------------

    def tape(self) -> list[Tensor]:
        """Nodes reachable from ``self`` in topological order (inputs first)."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = self.tape()
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate buffers are not needed once the pass is over
        for node in order:
            if node._parents:
                node.grad = None if node is not self else node.grad

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a scalar is supported")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return scale(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return swap_last(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{op}: non-finite input")


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: a._accumulate(g * c))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def tsum(a: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: a._accumulate(np.swapaxes(g, -1, -2)))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU, ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    xd = x.data
    t = np.tanh(GELU_SCALE * (xd + GELU_COEF * (xd * xd * xd)))
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dt = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * xd * xd)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dt))

    return _make(out.astype(xd.dtype, copy=False), (x,), back)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or a batched product of two 3-D tensors with equal batch extent."""
    if a.data.ndim not in (2, 3) or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, row_mask: np.ndarray | None = None,
           columnwise: bool = False) -> Tensor:
    """``x @ w + b`` for 2-D ``x``.

    ``row_mask`` (one 0/1 entry per row of ``x``) drops the masked rows'
    contributions to the gradients of ``w`` and ``b`` while leaving the
    gradient of ``x`` untouched; token-level expert filtering relies on it.

    ``columnwise=True`` reduces over the inner axis with a fixed per-column
    summation order, so each output column is bit-identical no matter how
    many columns ``w`` has (BLAS tiling does not guarantee this).
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: shape mismatch {x.shape} @ {w.shape}")
    if columnwise:
        out = (x.data[:, :, None] * w.data[None, :, :]).sum(axis=1)
    else:
        out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        gm = g if row_mask is None else g * row_mask[:, None].astype(g.dtype)
        if w.requires_grad:
            w._accumulate(x.data.T @ gm)
        if b is not None and b.requires_grad:
            b._accumulate(gm.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back)


# -- normalisation and distributions ------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis (biased variance, ``eps`` = 1e-5), then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def back(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxh = g * gain.data
            x._accumulate(inv / n * (n * dxh - dxh.sum(axis=-1, keepdims=True)
                                     - xhat * (dxh * xhat).sum(axis=-1, keepdims=True)))

    return _make((xhat * gain.data + bias.data).astype(xd.dtype, copy=False), (x, gain, bias), back)


def softmax(x: Tensor, axis: int = -1, where: np.ndarray | None = None,
            order_invariant: bool = False) -> Tensor:
    """Softmax along ``axis``.

    ``where`` (boolean, broadcastable to ``x``) marks the admissible entries;
    the rest get probability exactly 0.  With ``order_invariant`` the
    normaliser is summed sequentially over sorted terms, making every
    probability independent of where each entry sits along the axis and of
    how many masked (zero) entries the axis carries.  numpy's ``sum`` is
    pairwise, so its rounding depends on the axis length; ``cumsum`` is not.
    """
    _check_finite(x.data, "softmax")
    xd = x.data
    if where is not None:
        xd = np.where(where, xd, -np.inf)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    if order_invariant:
        z = np.take(np.cumsum(np.sort(e, axis=axis), axis=axis), [-1], axis=axis)
    else:
        z = e.sum(axis=axis, keepdims=True)
    y = e / z

    def back(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), back)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored rows of 2-D ``logits``."""
    _check_finite(logits.data, "cross_entropy")
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no target positions")
    rows = np.nonzero(valid)[0]
    cols = targets[rows]
    if cols.min() < 0 or cols.max() >= logits.shape[1]:
        raise ValueError("cross_entropy: target id out of range")
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    lsm = shifted - lse
    loss = -lsm[rows, cols].sum() / count

    def back(g):
        d = np.zeros_like(xd)
        d[rows] = np.exp(lsm[rows])
        d[rows, cols] -= 1.0
        logits._accumulate(d * (g / count))

    return _make(np.asarray(loss, dtype=xd.dtype), (logits,), back)


def kl_divergence(p: Tensor, log_q: Tensor) -> Tensor:
    """Row-averaged ``KL(p || q)`` along the last axis, with ``0 log 0 = 0``."""
    _check_finite(log_q.data, "kl_divergence")
    pd = p.data
    if pd.shape != log_q.shape:
        raise DimensionError(f"kl_divergence: {pd.shape} vs {log_q.shape}")
    if (pd < 0).any() or not np.allclose(pd.sum(axis=-1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("kl_divergence: p is not a distribution along the last axis")
    rows = pd.size // pd.shape[-1]
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    terms = np.where(pos, pd * (logp - log_q.data), 0.0)
    value = terms.sum() / rows

    def back(g):
        if log_q.requires_grad:
            log_q._accumulate(-pd * (g / rows))
        if p.requires_grad:
            p._accumulate(np.where(pos, logp - log_q.data + 1.0, 0.0) * (g / rows))

    return _make(np.asarray(value, dtype=log_q.dtype), (p, log_q), back)


# -- selection and lookup ---------------------------------------------------------------


def top_k(x: Tensor, k: int) -> tuple[np.ndarray, Tensor]:
    """Indices and values of the ``k`` largest entries along the last axis.

    Ties go to the lowest index.  Indices are returned sorted by value
    (descending); only the values carry gradient.
    """
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k: k={k} outside [1, {n}]")
    idx = np.argsort(-x.data, axis=-1, kind="stable")[..., :k]
    return idx, gather(x, idx)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """``take_along_axis`` on the last axis; gradient scatters back to the taken entries."""
    def back(g):
        n = x.shape[-1]
        flat = np.zeros(x.data.size, dtype=x.data.dtype)
        base = (np.arange(x.data.size // n) * n)[:, None]
        # add.at so repeated indices within a row accumulate
        np.add.at(flat, (base + idx.reshape(-1, idx.shape[-1])).reshape(-1), g.reshape(-1))
        x._accumulate(flat.reshape(x.shape))

    return _make(np.take_along_axis(x.data, idx, axis=-1), (x,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding_lookup: id out of range")

    def back(g):
        d = np.zeros_like(table.data)
        np.add.at(d, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(d)

    return _make(table.data[ids], (table,), back)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Rows ``x[rows]`` of a 2-D tensor (``rows`` must not repeat)."""
    def back(g):
        d = np.zeros_like(x.data)
        d[rows] = g
        x._accumulate(d)

    return _make(x.data[rows], (x,), back)


def mixture_combine(gates: Tensor, selected: np.ndarray, outputs: list[Tensor | None],
                    rows: list[np.ndarray] | None = None) -> Tensor:
    """Per-row weighted sum ``sum_s gates[i, s] * outputs[selected[i, s]][i]``.

    ``outputs[e]`` may cover only the rows listed in ``rows[e]`` (or be
    ``None`` when expert ``e`` is unused).  Accumulation runs over slots in
    order, so each row's result depends only on the values gathered, not on
    expert numbering.  Experts absent from a row's selection receive an
    exactly-zero gradient for that row.
    """
    n, k = selected.shape
    live = [o for o in outputs if o is not None]
    if not live:
        raise ValueError("mixture_combine: no expert outputs")
    width = live[0].shape[1]
    stacked = np.zeros((len(outputs), n, width), dtype=live[0].dtype)
    for e, o in enumerate(outputs):
        if o is not None:
            if rows is None or rows[e] is None:
                stacked[e] = o.data
            else:
                stacked[e, rows[e]] = o.data
    token = np.arange(n)
    gd = gates.data
    out = np.zeros((n, width), dtype=stacked.dtype)
    picked = []
    for s in range(k):
        ys = stacked[selected[:, s], token]
        picked.append(ys)
        out = out + gd[:, s:s + 1] * ys

    def back(g):
        if gates.requires_grad:
            gates._accumulate(np.stack([(g * ys).sum(axis=1) for ys in picked], axis=1))
        for e, o in enumerate(outputs):
            if o is None or not o.requires_grad:
                continue
            w = np.where(selected == e, gd, 0.0).sum(axis=1).astype(g.dtype)
            ge = g * w[:, None]
            o._accumulate(ge if rows is None or rows[e] is None else ge[rows[e]])

    return _make(out, (gates, *live), back)
