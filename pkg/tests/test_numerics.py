from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from desmoe import numerics as nx
from desmoe.numerics import Tensor
from fd_oracle import max_rel_err, numeric_grad

RNG = np.random.default_rng(1234)


def param(*shape, scale=1.0):
    return Tensor(RNG.normal(0, scale, size=shape), requires_grad=True, dtype=np.float64)


def check(build, params, tol=1e-6):
    """Analytic gradients of sum(w * build()) against central differences."""
    probe = RNG.normal(size=build().shape)

    def f():
        with nx.no_grad():
            return float((build().data * probe).sum())

    for p in params:
        p.grad = None
    out = build()
    (out * Tensor(probe)).sum().backward()
    numeric = numeric_grad(f, [p.data for p in params])
    for p, n in zip(params, numeric):
        assert max_rel_err(p.grad, n, floor=1e-6) < tol, p.name


def test_add_mul_broadcast_grads():
    a, b = param(3, 4), param(4)
    check(lambda: a * b + b, [a, b])


def test_gelu_matches_tanh_formula_and_grad():
    x = param(5, 3)
    ref = 0.5 * x.data * (1 + np.tanh(math.sqrt(2 / math.pi) * (x.data + 0.044715 * x.data ** 3)))
    np.testing.assert_allclose(nx.gelu(x).data, ref, rtol=1e-12)
    check(lambda: nx.gelu(x), [x])


def test_matmul_2d_and_batched():
    a, b = param(3, 4), param(4, 2)
    check(lambda: nx.matmul(a, b), [a, b])
    c, d = param(2, 3, 4), param(2, 4, 5)
    check(lambda: nx.matmul(c, d), [c, d])


@pytest.mark.parametrize("columnwise", [False, True])
def test_linear_grads(columnwise):
    x, w, b = param(6, 4), param(4, 3), param(3)
    check(lambda: nx.linear(x, w, b, columnwise=columnwise), [x, w, b])


def test_columnwise_linear_values_match_matmul():
    x, w = RNG.normal(size=(7, 5)), RNG.normal(size=(5, 3))
    y = nx.linear(Tensor(x), Tensor(w), columnwise=True).data
    np.testing.assert_allclose(y, x @ w, rtol=1e-12)


def test_columnwise_linear_column_independent_of_width():
    # a column's values must not depend on how many columns sit beside it
    x, w = RNG.normal(size=(9, 16)).astype(np.float32), RNG.normal(size=(16, 8)).astype(np.float32)
    wide = np.concatenate([w, w[:, 3:4]], axis=1)
    a = nx.linear(Tensor(x), Tensor(w), columnwise=True).data
    b = nx.linear(Tensor(x), Tensor(wide), columnwise=True).data
    assert np.array_equal(a, b[:, :8])
    assert np.array_equal(b[:, 3], b[:, 8])


def test_linear_row_mask_filters_parameter_grads_only():
    x, w, b = param(5, 3), param(3, 2), param(2)
    mask = np.array([1, 0, 1, 0, 1], dtype=float)
    g = RNG.normal(size=(5, 2))
    nx.linear(x, w, b, row_mask=mask).backward(g)
    keep = mask.astype(bool)
    np.testing.assert_allclose(w.grad, x.data[keep].T @ g[keep], rtol=1e-12)
    np.testing.assert_allclose(b.grad, g[keep].sum(0), rtol=1e-12)
    np.testing.assert_allclose(x.grad, g @ w.data.T, rtol=1e-12)


def test_layer_norm_grads():
    x, g, b = param(4, 6), param(6), param(6)
    check(lambda: nx.layer_norm(x, g, b), [x, g, b])


def test_softmax_with_where_and_log_softmax():
    x = param(4, 5)
    where = np.ones((4, 5), bool)
    where[1, 2] = where[3, 0] = False
    check(lambda: nx.softmax(x, where=where), [x])
    y = nx.softmax(x, where=where).data
    assert y[1, 2] == 0.0 and y[3, 0] == 0.0
    np.testing.assert_allclose(y.sum(1), 1.0, rtol=1e-12)
    check(lambda: nx.log_softmax(x), [x])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 7), elements=st.floats(-8, 8, width=32)), st.randoms(use_true_random=False))
def test_order_invariant_softmax_commutes_with_permutation(x, rnd):
    perm = list(range(7))
    rnd.shuffle(perm)
    a = nx.softmax(Tensor(x), order_invariant=True).data
    b = nx.softmax(Tensor(x[:, perm]), order_invariant=True).data
    assert np.array_equal(a[:, perm], b)


def test_cross_entropy_grad_and_closed_forms():
    logits = param(6, 5)
    targets = np.array([0, 4, -1, 2, -1, 1])
    check(lambda: nx.cross_entropy(logits, targets), [logits])
    uniform = nx.cross_entropy(Tensor(np.zeros((3, 11))), np.array([1, 2, 3])).item()
    assert uniform == pytest.approx(math.log(11), rel=1e-12)
    with pytest.raises(ValueError):
        nx.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, -1]))
    with pytest.raises(nx.NumericError):
        nx.cross_entropy(Tensor(np.array([[np.nan, 0.0]])), np.array([0]))


def test_kl_closed_form_two_experts():
    # p = softmax(0, 0) = (1/2, 1/2); q = softmax(ln 3, 0) = (3/4, 1/4)
    p = nx.softmax(Tensor(np.array([[0.0, 0.0]])))
    log_q = nx.log_softmax(Tensor(np.array([[math.log(3.0), 0.0]])))
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert nx.kl_divergence(p, log_q).item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.5 * math.log(4 / 3), abs=1e-15)


def test_kl_grad_and_zero_log_zero():
    z = param(4, 3)
    p = Tensor(np.array([[1.0, 0.0, 0.0], [0.2, 0.3, 0.5], [0.0, 0.5, 0.5], [1 / 3, 1 / 3, 1 / 3]]))
    check(lambda: nx.kl_divergence(p, nx.log_softmax(z)), [z])
    same = nx.kl_divergence(p, Tensor(np.log(np.clip(p.data, 1e-300, None)))).item()
    assert abs(same) < 1e-12
    with pytest.raises(ValueError):
        nx.kl_divergence(Tensor(np.array([[0.5, 0.6]])), Tensor(np.zeros((1, 2))))


def test_top_k_ties_and_errors():
    x = Tensor(np.array([[1.0, 3.0, 3.0, 0.0], [2.0, 2.0, 2.0, 2.0]]))
    idx, vals = nx.top_k(x, 2)
    assert idx.tolist() == [[1, 2], [0, 1]]
    assert vals.data.tolist() == [[3.0, 3.0], [2.0, 2.0]]
    for k in (0, 5):
        with pytest.raises(ValueError):
            nx.top_k(x, k)


def test_gather_embedding_take_rows_grads():
    x = param(4, 5)
    idx = np.array([[0, 3], [4, 4], [1, 2], [2, 0]])
    check(lambda: nx.gather(x, idx), [x])
    table = param(6, 3)
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    check(lambda: nx.embedding_lookup(table, ids), [table])
    check(lambda: nx.take_rows(x, np.array([3, 1])), [x])


def test_mixture_combine_matches_loop_and_grads():
    n, e, k, w = 6, 4, 2, 3
    gates = param(n, k)
    selected = np.array([[0, 1], [2, 3], [1, 0], [3, 2], [0, 2], [1, 3]])
    outs = [param(n, w) for _ in range(e)]
    got = nx.mixture_combine(gates, selected, outs).data
    ref = np.zeros((n, w))
    for i in range(n):
        for s in range(k):
            ref[i] += gates.data[i, s] * outs[selected[i, s]].data[i]
    np.testing.assert_allclose(got, ref, rtol=1e-12)
    check(lambda: nx.mixture_combine(gates, selected, outs), [gates, *outs])


def test_mixture_combine_zero_grad_for_unselected_rows():
    gates = param(3, 1)
    selected = np.array([[0], [1], [0]])
    outs = [param(3, 2), param(3, 2)]
    nx.mixture_combine(gates, selected, outs).backward(np.ones((3, 2)))
    assert np.all(outs[0].grad[1] == 0.0)
    assert np.all(outs[1].grad[[0, 2]] == 0.0)


def test_mixture_combine_sparse_rows_equal_dense():
    gates = param(5, 2)
    selected = np.array([[0, 1], [1, 0], [0, 1], [1, 0], [0, 1]])
    dense = [param(5, 2), param(5, 2)]
    rows = [np.arange(5), np.arange(5)]
    sparse = [nx.take_rows(d, r) for d, r in zip(dense, rows)]
    a = nx.mixture_combine(gates, selected, dense).data
    b = nx.mixture_combine(gates, selected, sparse, rows).data
    assert np.array_equal(a, b)


def test_backward_accumulates_through_shared_subgraph():
    x = param(3)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-12)


def test_no_grad_builds_no_graph():
    x = param(2, 2)
    with nx.no_grad():
        y = nx.gelu(x)
    assert not y.requires_grad


def test_dimension_errors():
    with pytest.raises(nx.DimensionError):
        nx.linear(param(2, 3), param(4, 2))
    with pytest.raises(nx.DimensionError):
        nx.cross_entropy(param(2, 3), np.array([0, 1, 2]))


def test_order_invariant_softmax_ignores_masked_padding():
    # pairwise summation would regroup terms once the axis passes 8 entries
    rng = np.random.default_rng(11)
    x = rng.normal(size=(50, 8))
    base = nx.softmax(nx.Tensor(x), where=np.ones_like(x, bool), order_invariant=True).data
    for extra in range(1, 9):
        wide = np.concatenate([x, rng.normal(size=(50, extra))], axis=1)
        where = np.zeros(wide.shape, bool)
        where[:, :8] = True
        perm = rng.permutation(wide.shape[1])
        got = nx.softmax(nx.Tensor(wide[:, perm]), where=where[:, perm], order_invariant=True).data
        inv = np.argsort(perm)
        assert got[:, inv][:, :8].tobytes() == base.tobytes()
