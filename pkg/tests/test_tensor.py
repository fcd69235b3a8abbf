"""Autodiff core: op-level gradients against finite differences plus a few
hand-computed oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avalign import tensor as T
from avalign.errors import ContractError, NanError, ShapeError
from avalign.tensor import Rng, Tensor, finite_difference_check


def fresh(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# -- Rng ---------------------------------------------------------------------

def test_rng_deterministic():
    a = Rng(42).uniform(0, 1, 10)
    b = Rng(42).uniform(0, 1, 10)
    assert np.array_equal(a, b)


def test_rng_split_streams_independent():
    root = Rng(7)
    a = root.split("a").normal(100)
    b = root.split("b").normal(100)
    assert not np.array_equal(a, b)
    # splitting is a pure function of (seed, tag)
    assert np.array_equal(a, Rng(7).split("a").normal(100))


def test_rng_split_differs_from_parent_draws():
    root = Rng(3)
    child = root.split("x")
    assert not np.array_equal(root.uniform(0, 1, 50), child.uniform(0, 1, 50))


# -- forward values against numpy -------------------------------------------

def test_matmul_matches_triple_loop():
    rng = Rng(0)
    a = rng.uniform(-1, 1, (4, 3))
    b = rng.uniform(-1, 1, (3, 5))
    out = T.matmul(Tensor(a), Tensor(b)).data
    ref = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.allclose(out, ref, atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = Rng(1).uniform(-5, 5, (6, 9))
    s = T.softmax(Tensor(x)).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert (s > 0).all()


def test_softmax_shift_invariance():
    x = Rng(2).uniform(-3, 3, (4, 7))
    assert np.allclose(
        T.softmax(Tensor(x)).data, T.softmax(Tensor(x + 100.0)).data, atol=1e-12
    )


def test_log_softmax_consistent_with_softmax():
    x = Rng(3).uniform(-4, 4, (5, 8))
    assert np.allclose(
        T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-10
    )


def test_layer_norm_output_standardized():
    x = Rng(4).uniform(-10, 10, (3, 17))
    g = np.ones(17)
    b = np.zeros(17)
    y = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    assert np.allclose(y.std(axis=-1), 1.0, atol=1e-3)  # eps-limited


def test_sigmoid_extremes_stable():
    y = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert np.allclose(y, [0.0, 0.5, 1.0], atol=1e-12)


# -- hand-derived gradient oracles -------------------------------------------

def test_mul_gradient_by_hand():
    a, b = fresh([2.0, 3.0]), fresh([5.0, 7.0])
    (a * b).sum().backward()
    assert np.allclose(a.grad, [5.0, 7.0])
    assert np.allclose(b.grad, [2.0, 3.0])


def test_div_gradient_by_hand():
    a, b = fresh([6.0]), fresh([3.0])
    (a / b).sum().backward()
    assert np.allclose(a.grad, [1.0 / 3.0])
    assert np.allclose(b.grad, [-6.0 / 9.0])


def test_grad_accumulates_through_reuse():
    x = fresh([1.5])
    y = x * x + x  # dy/dx = 2x + 1 = 4
    y.sum().backward()
    assert np.allclose(x.grad, [4.0])


def test_backward_requires_scalar():
    x = fresh([[1.0, 2.0]])
    with pytest.raises(ContractError):
        x.backward()


# -- finite-difference sweeps over the op set ---------------------------------

OPS = {
    "add": lambda x: (x + 3.0).sum(),
    "sub": lambda x: (x - 0.5).sum(),
    "mul": lambda x: (x * x).sum(),
    "div": lambda x: (x / 2.5).sum(),
    "neg": lambda x: (-x).sum(),
    "relu": lambda x: T.relu(x).sum(),
    "sigmoid": lambda x: T.sigmoid(x).sum(),
    "exp": lambda x: T.exp(x * 0.1).sum(),
    "mean": lambda x: x.mean(),
    "sum_axis": lambda x: T.tsum(x, axis=0).sum(),
    "reshape": lambda x: (x.reshape(-1) * 2.0).sum(),
    "transpose": lambda x: (x.transpose() * x.transpose()).sum(),
    "softmax": lambda x: (T.softmax(x) * T.softmax(x)).sum(),
    "log_softmax": lambda x: (T.log_softmax(x) * 0.3).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_fd(name):
    x = Tensor(Rng(hash(name) & 0xFFFF).uniform(0.3, 2.0, (3, 4)), dtype=np.float64)
    assert finite_difference_check(OPS[name], x) < 1e-6


def test_log_gradient_fd():
    x = Tensor(Rng(11).uniform(0.5, 3.0, (4,)), dtype=np.float64)
    assert finite_difference_check(lambda t: T.log(t).sum(), x) < 1e-6


def test_matmul_gradient_fd_both_sides():
    rng = Rng(12)
    b = Tensor(rng.uniform(-1, 1, (3, 4)), dtype=np.float64)
    a = Tensor(rng.uniform(-1, 1, (2, 3)), dtype=np.float64)
    assert finite_difference_check(lambda t: T.matmul(t, b).sum(), a) < 1e-6
    a2 = Tensor(a.data.copy())
    assert finite_difference_check(lambda t: (T.matmul(a2, t) * 0.7).sum(), b) < 1e-6


def test_broadcast_add_gradient_fd():
    bias = Tensor(Rng(13).uniform(-1, 1, (5,)), dtype=np.float64)
    other = Rng(14).uniform(-1, 1, (4, 5))
    assert finite_difference_check(lambda t: (Tensor(other) + t).sum(), bias) < 1e-6


def test_layer_norm_gradient_fd_all_inputs():
    rng = Rng(15)
    x = Tensor(rng.uniform(-2, 2, (3, 6)), dtype=np.float64)
    g = Tensor(rng.uniform(0.5, 1.5, (6,)), dtype=np.float64)
    b = Tensor(rng.uniform(-0.5, 0.5, (6,)), dtype=np.float64)
    gn, bn = Tensor(g.data.copy()), Tensor(b.data.copy())

    def via_x(t):
        y = T.layer_norm(t, gn, bn)
        return (y * y).sum()

    assert finite_difference_check(via_x, x) < 1e-6
    xn = Tensor(x.data.copy())
    assert finite_difference_check(lambda t: (T.layer_norm(xn, t, bn) * 0.5).sum(), g) < 1e-6
    assert finite_difference_check(lambda t: (T.layer_norm(xn, gn, t) * 0.5).sum(), b) < 1e-6


def test_embedding_gradient_fd():
    table = Tensor(Rng(16).uniform(-1, 1, (7, 4)), dtype=np.float64)
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    assert finite_difference_check(lambda t: (T.embedding(t, ids) * 0.3).sum(), table) < 1e-6


def test_concat_gradient_fd():
    rng = Rng(17)
    a = Tensor(rng.uniform(-1, 1, (2, 3)), dtype=np.float64)
    b_data = rng.uniform(-1, 1, (2, 2))
    assert (
        finite_difference_check(
            lambda t: (T.concat([t, Tensor(b_data)], axis=1) * 1.3).sum(), a
        )
        < 1e-6
    )


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid")])
def test_conv2d_gradient_fd(stride, padding):
    rng = Rng(18)
    x = Tensor(rng.uniform(-1, 1, (2, 5, 5, 2)), dtype=np.float64)
    w = Tensor(rng.uniform(-1, 1, (3, 3, 2, 3)), dtype=np.float64)
    b = Tensor(rng.uniform(-1, 1, (3,)), dtype=np.float64)

    def via_x(t):
        return T.conv2d(t, w, b, stride=stride, padding=padding).sum()

    def via_w(t):
        return T.conv2d(Tensor(x.data.copy()), t, b, stride=stride, padding=padding).sum()

    def via_b(t):
        return T.conv2d(Tensor(x.data.copy()), w, t, stride=stride, padding=padding).sum()

    assert finite_difference_check(via_x, x) < 1e-6
    assert finite_difference_check(via_w, w) < 1e-6
    assert finite_difference_check(via_b, b) < 1e-6


def test_conv2d_matches_direct_sum():
    # 1x1 batch, valid padding: compare against the literal sliding-window sum
    rng = Rng(19)
    x = rng.uniform(-1, 1, (1, 4, 4, 2))
    w = rng.uniform(-1, 1, (2, 2, 2, 3))
    out = T.conv2d(Tensor(x), Tensor(w), padding="valid").data
    ref = np.zeros((1, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = x[0, i : i + 2, j : j + 2, :]
            for c in range(3):
                ref[0, i, j, c] = (patch * w[:, :, :, c]).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_channel_mismatch_raises():
    x = Tensor(np.zeros((1, 4, 4, 2)))
    w = Tensor(np.zeros((3, 3, 5, 4)))
    with pytest.raises(ShapeError):
        T.conv2d(x, w)


# -- dropout -----------------------------------------------------------------

def test_dropout_eval_is_identity():
    x = Tensor(Rng(20).uniform(-1, 1, (8, 8)))
    y = T.dropout(x, 0.5, None, train=False)
    assert y is x


def test_dropout_train_requires_rng():
    with pytest.raises(ContractError):
        T.dropout(Tensor(np.ones(4)), 0.5, None, train=True)


@given(p=st.floats(0.05, 0.8))
@settings(max_examples=20, deadline=None)
def test_dropout_preserves_expectation(p):
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, p, Rng(99).split(str(p)), train=True)
    # inverted dropout: E[y] == x; mean over 10k elements
    assert abs(y.data.mean() - 1.0) < 0.08
    kept = y.data != 0
    assert abs(kept.mean() - (1 - p)) < 0.05


def test_dropout_gradient_mask_matches_forward():
    x = Tensor(np.ones((4, 4), dtype=np.float64), requires_grad=True)
    y = T.dropout(x, 0.5, Rng(5), train=True)
    y.sum().backward()
    assert np.array_equal(x.grad != 0, y.data != 0)


# -- nan checking --------------------------------------------------------------

def test_nan_check_names_offending_op():
    T.NAN_CHECK = True
    try:
        with np.errstate(invalid="ignore"), pytest.raises(NanError, match="log"):
            T.log(Tensor(np.array([-1.0])))
    finally:
        T.NAN_CHECK = False


# -- finite_difference_check contract ------------------------------------------

def test_fd_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        finite_difference_check(lambda t: t.sum(), Tensor(np.ones(3)), eps=1.0)


def test_fd_check_flags_wrong_gradient():
    # a deliberately wrong backward: claims d(2x)/dx = 1
    def wrong(t):
        out = Tensor(t.data.sum() * 2.0)
        out._parents = (t,)
        out._backward = lambda g: t._accumulate(np.ones_like(t.data) * g)
        return out

    err = finite_difference_check(wrong, Tensor(np.ones(3, dtype=np.float64)))
    assert err > 0.1
