import gc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from txlmem import tensor as T
from txlmem.tensor import TRACKER, AllocationTracker, EmptyAttentionContext, ShapeError, Tape, Tensor

from oracles import check_op, cross_entropy_loop, matmul_loop, numeric_grad, rel_error

TOL = 1e-5
rng = np.random.default_rng(1234)


def r(*shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.sign(x) * (np.abs(x) + lo)
    return x


GRAD_CASES = {
    "add": (T.add, r(3, 4), r(3, 4)),
    "add_broadcast": (T.add, r(2, 3, 4), r(4)),
    "sub": (T.sub, r(2, 3), r(2, 3)),
    "mul": (T.mul, r(3, 4), r(3, 4)),
    "mul_broadcast": (T.mul, r(2, 3, 4), r(3, 4)),
    "scale": (lambda a: T.scale(a, -1.7), r(3, 4)),
    "relu": (T.relu, r(4, 5, lo=0.1)),
    "gelu": (T.gelu, r(4, 5)),
    "dropout": (lambda a: T.dropout(a, 0.3, np.random.default_rng(7)), r(4, 5)),
    "sum_all": (lambda a: T.sum_(a), r(3, 4)),
    "sum_axis": (lambda a: T.sum_(a, axis=1), r(3, 4, 2)),
    "sum_keepdims": (lambda a: T.sum_(a, axis=-1, keepdims=True), r(3, 4)),
    "mean": (lambda a: T.mean(a, axis=0), r(3, 4)),
    "reshape": (lambda a: T.reshape(a, (4, 3)), r(3, 4)),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), r(2, 3, 4)),
    "concat": (lambda a, b: T.concat([a, b], axis=1), r(2, 3, 4), r(2, 2, 4)),
    "slice": (lambda a: T.slice_(a, (slice(None), slice(1, 3))), r(3, 4)),
    "take": (lambda a: T.take(a, np.array([[0, 2], [2, 1]]), axis=1), r(2, 3)),
    "embedding": (lambda w: T.embedding(w, np.array([[1, 4, 1], [0, 3, 4]])), r(5, 3)),
    "matmul": (T.matmul, r(3, 4), r(4, 5)),
    "matmul_batched": (T.matmul, r(2, 3, 4), r(2, 4, 5)),
    "matmul_fold": (T.matmul, r(2, 3, 4), r(4, 5)),
    "matmul_broadcast_batch": (T.matmul, r(2, 2, 3, 4), r(2, 1, 4, 5)),
    "softmax": (lambda a: T.softmax(a, axis=-1), r(3, 5)),
    "softmax_axis0": (lambda a: T.softmax(a, axis=0), r(3, 5)),
    "layer_norm": (T.layer_norm, r(3, 6), r(6), r(6)),
    "cross_entropy": (lambda a: T.cross_entropy(a, np.array([[0, 3, 2], [4, 4, 1]])), r(2, 3, 5)),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients(name):
    op, *arrays = GRAD_CASES[name]
    errs = check_op(op, *arrays)
    assert max(errs) < TOL, (name, errs)


def test_gradient_of_masked_softmax_row():
    x = r(3, 4)
    mask = np.triu(np.full((3, 4), -np.inf), k=2)
    assert max(check_op(lambda a: T.softmax(T.add(a, Tensor(mask)), axis=-1), x)) < TOL


def test_detach_blocks_gradient():
    x = Tensor(r(3), requires_grad=True)
    with Tape() as tape:
        y = T.sum_(T.mul(T.detach(x), x))
    g = tape.backward(y, wrt=[x])[x]
    np.testing.assert_allclose(g, x.data)


def test_matmul_matches_loop_oracle():
    a, b = r(5, 7), r(7, 3)
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loop(a, b), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_batched_matmul_matches_loop(batch, n, k, m, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(batch, n, k)), g.normal(size=(k, m))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(batch):
        np.testing.assert_allclose(out[i], matmul_loop(a[i], b), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 9), st.integers(0, 10_000))
def test_cross_entropy_matches_loop(rows, vocab, seed):
    g = np.random.default_rng(seed)
    logits = g.normal(size=(rows, 3, vocab)) * 5
    targets = g.integers(0, vocab, (rows, 3))
    got = T.cross_entropy(Tensor(logits), targets).item()
    assert abs(got - cross_entropy_loop(logits, targets)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one_and_shift_invariant(n, m, shift, seed):
    x = np.random.default_rng(seed).normal(size=(n, m)) * 10
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_softmax_of_huge_logits_is_finite():
    p = T.softmax(Tensor(np.array([[1e300, 0.0, -1e300]]))).data
    assert np.all(np.isfinite(p))


def test_fully_masked_row_raises():
    with pytest.raises(EmptyAttentionContext):
        T.softmax(Tensor(np.full((2, 3), -np.inf)))


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(r(3, 4)), Tensor(r(3)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(r(3, 4)), Tensor(r(3, 4)))
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(r(3, 4)), Tensor(r(3)), Tensor(r(4)))
    with pytest.raises(TypeError):
        T.add(Tensor(r(3), dtype="fp32"), Tensor(r(3), dtype="fp64"))


def test_backward_needs_scalar_on_tape():
    x = Tensor(r(3), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)
    with pytest.raises(ValueError):
        Tape().backward(T.sum_(y))


def test_unreached_leaf_gets_zeros_and_backward_repeats():
    x, unused = Tensor(r(3), requires_grad=True), Tensor(r(2), requires_grad=True)
    with Tape() as tape:
        y = T.sum_(T.gelu(x))
    g1 = tape.backward(y, wrt=[x, unused])
    g2 = tape.backward(y, wrt=[x, unused])
    assert np.all(g1[unused] == 0)
    np.testing.assert_array_equal(g1[x], g2[x])


def test_no_tape_records_nothing():
    x = Tensor(r(3), requires_grad=True)
    y = T.mul(x, x)
    assert y._node is None and not y.requires_grad


def test_dtype_preserved_fp32():
    x = Tensor(r(2, 4), dtype="fp32", requires_grad=True)
    w = Tensor(r(4, 4), dtype="fp32", requires_grad=True)
    g, b = Tensor(np.ones(4), dtype="fp32"), Tensor(np.zeros(4), dtype="fp32")
    with Tape() as tape:
        y = T.gelu(T.layer_norm(x @ w, g, b))
        loss = T.cross_entropy(y, np.array([0, 3]))
    assert y.dtype == np.float32 and loss.dtype == np.float32
    assert all(v.dtype == np.float32 for v in tape.backward(loss).values())


def test_tracker_counts_views_once_and_releases():
    tr = AllocationTracker()
    a = np.zeros(1000)
    tr.track(a)
    tr.track(a[10:20])
    assert tr.live == 8000
    del a
    gc.collect()
    assert tr.live == 0 and tr.peak == 8000
    tr.reset_peak()
    assert tr.peak == 0


def test_tape_releases_intermediates():
    x = Tensor(r(64, 64), requires_grad=True)
    base = TRACKER.live
    with Tape() as tape:
        loss = T.sum_(T.gelu(x @ x))
    tape.backward(loss)
    del tape, loss
    gc.collect()
    assert TRACKER.live <= base


def test_numeric_grad_helper_on_known_function():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float((x**3).sum()), x)
    assert rel_error(g, 3 * x**2) < 1e-9
