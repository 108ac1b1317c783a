import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepchoice.autodiff import (
    BN_EPS,
    OPERATORS,
    NonFiniteError,
    ShapeError,
    Tape,
    batchnorm_stats_update,
    check_finite,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_op(build, *arrays_in, tol=1e-6):
    """Compare the tape gradient of sum(w * build(...)) with central differences."""
    rng = np.random.default_rng(0)
    vals = [np.array(a, dtype=np.float64) for a in arrays_in]

    def run():
        t = Tape()
        leaves = [t.leaf(v) for v in vals]
        out = build(t, *leaves)
        return t, leaves, out

    _, _, out0 = run()
    w = rng.standard_normal(out0.value.shape)

    def value():
        _, _, out = run()
        return float(np.sum(w * out.value))

    t, leaves, out = run()
    wn = t.leaf(w, kind="const")
    loss = t.matmul(t.reshape(out, (-1,)), t.reshape(wn, (-1,)))
    grads = t.backward(loss, leaves)
    for leaf, v in zip(leaves, vals):
        num = numeric_grad(value, v)
        np.testing.assert_allclose(grads[leaf], num, rtol=tol, atol=tol)


def test_operator_list_is_complete():
    t = Tape()
    for op in OPERATORS:
        assert op in t.forward.__globals__["_IMPL"]


def test_softmax_uniform():
    t = Tape()
    np.testing.assert_allclose(t.softmax(t.leaf(np.zeros(3))).value, np.full(3, 1 / 3))


def test_relu_values():
    t = Tape()
    np.testing.assert_array_equal(t.relu(t.leaf([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])


def test_batchnorm_hand_example():
    t = Tape()
    out = t.batchnorm(t.leaf([[2.0], [4.0]]))
    expect = np.array([[-1.0], [1.0]]) / np.sqrt(1.0 + BN_EPS)
    np.testing.assert_allclose(out.value, expect, rtol=0, atol=1e-15)
    mean, var = out.extra
    np.testing.assert_allclose(mean, [3.0])
    np.testing.assert_allclose(var, [1.0])


def test_batchnorm_training_needs_two_rows():
    t = Tape()
    with pytest.raises(ShapeError, match="batchnorm"):
        t.batchnorm(t.leaf([[1.0, 2.0]]))


def test_batchnorm_eval_uses_running_stats():
    t = Tape()
    out = t.batchnorm(t.leaf([[1.0]]), training=False, running=(np.array([0.5]), np.array([4.0])))
    np.testing.assert_allclose(out.value, [[0.5 / np.sqrt(4.0 + BN_EPS)]])
    with pytest.raises(ValueError):
        t.batchnorm(t.leaf([[1.0]]), training=False)


def test_relu_subgradient_and_doc_example():
    t = Tape()
    x = t.leaf([-1.0, 2.0, 0.0])
    g = t.backward(t.reduce_sum(t.relu(x)), [x])[x]
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_log_softmax_gradient_example():
    t = Tape()
    x = t.leaf([0.0, 0.0])
    g = t.backward(t.embed_select(t.log_softmax(x), 0), [x])[x]
    np.testing.assert_allclose(g, [0.5, -0.5])


def test_backward_rejects_non_scalar():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        t.backward(t.relu(x), [x])


def test_detached_leaf_gets_zero_gradient():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    other = t.leaf([[3.0]])
    g = t.backward(t.reduce_sum(t.tanh(x)), [x, other])
    np.testing.assert_array_equal(g[other], np.zeros((1, 1)))


def test_matmul_shape_error_names_operator():
    t = Tape()
    with pytest.raises(ShapeError) as info:
        t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((4, 5))))
    assert info.value.op == "matmul"
    assert (2, 3) in info.value.shapes and (4, 5) in info.value.shapes


@pytest.mark.parametrize(
    "op,args",
    [
        ("add", (np.ones((2, 3)), np.ones((4,)))),
        ("concat", (np.ones((2, 3)), np.ones((3, 3)))),
        ("reshape", (np.ones((2, 3)),)),
        ("embed_select", (np.ones((2, 3)),)),
    ],
)
def test_shape_errors(op, args):
    t = Tape()
    leaves = [t.leaf(a) for a in args]
    with pytest.raises(ShapeError):
        if op == "add":
            t.add(*leaves)
        elif op == "concat":
            t.concat(leaves, axis=1)
        elif op == "reshape":
            t.reshape(leaves[0], (4,))
        else:
            t.embed_select(leaves[0], 7, axis=1)


def test_nll_loss_shape_error():
    t = Tape()
    with pytest.raises(ShapeError):
        t.nll_loss(t.leaf(np.zeros((3, 2))), np.array([0, 1]))


def test_operand_from_other_tape():
    a, b = Tape(), Tape()
    with pytest.raises(ValueError, match="another tape"):
        a.relu(b.leaf([1.0]))


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(NonFiniteError, match="2 non-finite"):
        check_finite(np.array([1.0, np.nan, np.inf]))


def test_stats_update_examples():
    mean, var = batchnorm_stats_update((np.zeros(1), np.ones(1)), (np.ones(1), np.full(1, 2.0)), 0.1)
    np.testing.assert_allclose(mean, [0.1])
    np.testing.assert_allclose(var, [1.1])
    m1, v1 = batchnorm_stats_update((0.0, 1.0), (5.0, 7.0), 1.0)
    assert (m1, v1) == (5.0, 7.0)
    m0, v0 = batchnorm_stats_update((0.0, 1.0), (5.0, 7.0), 0.0)
    assert (m0, v0) == (0.0, 1.0)
    with pytest.raises(ValueError):
        batchnorm_stats_update((0.0, 1.0), (5.0, 7.0), 1.5)


def test_nodes_in_topological_order():
    t = Tape()
    x = t.leaf(np.ones((2, 2)))
    y = t.tanh(t.matmul(x, x))
    t.reduce_sum(t.add(y, x))
    for node in t.nodes:
        assert all(i.id < node.id for i in node.inputs)


r = np.random.default_rng(1)


@pytest.mark.parametrize(
    "build,inputs",
    [
        (lambda t, a, b: t.matmul(a, b), (r.standard_normal((3, 4)), r.standard_normal((4, 2)))),
        (lambda t, a, b: t.matmul(a, b), (r.standard_normal((2, 3, 4)), r.standard_normal(4))),
        (lambda t, a, b: t.matmul(a, b), (r.standard_normal((5, 2, 3)), r.standard_normal((5, 3, 2)))),
        (lambda t, a, b: t.add(a, b), (r.standard_normal((3, 4)), r.standard_normal((1, 4)))),
        (lambda t, a, b: t.scale(a, b), (r.standard_normal((3, 2)), r.standard_normal(1))),
        (lambda t, a: t.scale(a, 2.5), (r.standard_normal((3, 2)),)),
        (lambda t, a, b: t.concat([a, b], axis=1), (r.standard_normal((3, 2)), r.standard_normal((3, 1)))),
        (lambda t, a: t.relu(a), (r.standard_normal((4, 3)) + 0.3,)),
        (lambda t, a: t.tanh(a), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.power(a, 3), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.softmax(a), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.log_softmax(a), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.batchnorm(a), (r.standard_normal((6, 3)),)),
        (lambda t, a: t.batchnorm(a, axes=(0, 1)), (r.standard_normal((4, 3, 1)),)),
        (lambda t, a: t.embed_select(a, 1, axis=1), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.embed_select(a, np.array([0, 2, 0]), axis=0), (r.standard_normal((3, 2)),)),
        (lambda t, a: t.reduce_sum(a, axis=0), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.nll_loss(t.log_softmax(a), np.array([0, 2, 1, 1])), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.reshape(a, (2, 6)), (r.standard_normal((4, 3)),)),
        (lambda t, a: t.transpose(a, (2, 0, 1)), (r.standard_normal((2, 3, 4)),)),
    ],
)
def test_operator_gradients(build, inputs):
    check_op(build, *inputs)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-50, 50)))
def test_softmax_shift_invariant(x):
    t = Tape()
    a = t.softmax(t.leaf(x)).value
    b = t.softmax(t.leaf(x + 100.0)).value
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert abs(a.sum() - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=st.floats(-700, 700)))
def test_log_softmax_stays_finite(x):
    t = Tape()
    out = t.log_softmax(t.leaf(x)).value
    assert np.all(np.isfinite(out))
    assert np.all(out <= 1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)))
def test_batchnorm_training_moments(x):
    t = Tape()
    out = t.batchnorm(t.leaf(x)).value
    var = x.var(axis=0)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-8)
    # epsilon keeps the output variance just under one: s2 / (s2 + eps)
    np.testing.assert_allclose(out.var(axis=0), var / (var + BN_EPS), rtol=1e-9, atol=1e-12)
    big = var > 10.0
    assert np.all(np.abs(out.var(axis=0)[big] - 1.0) < 1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=st.floats(-100, 100)))
def test_softmax_rows(x):
    t = Tape()
    out = t.softmax(t.leaf(x)).value
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out >= 0) and np.all(out <= 1)
