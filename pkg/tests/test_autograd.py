import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from featqa import autograd as ag
from featqa.autograd import Tensor, backward, gradient_check
from featqa.errors import IndexOutOfRange, NonScalarLoss, ShapeMismatch
from featqa.gradcheck import OPS, op_suite


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_softmax_symmetric():
    assert np.allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0, rtol=0)


def test_cross_entropy_uniform():
    ce = ag.cross_entropy(Tensor(np.zeros((3, 4))), [0, 2, 3])
    assert np.allclose(ce.data, math.log(4), atol=1e-15)


def test_layer_norm_constant():
    assert np.all(ag.layer_norm(Tensor(np.full(6, 2.0))).data == 0.0)
    # 3.7 is inexact: the mean carries ~1e-16 roundoff, scaled up by 1/sqrt(eps)
    assert np.abs(ag.layer_norm(Tensor(np.full(6, 3.7))).data).max() < 1e-9


def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    backward(ag.sum(x))
    assert (x.grad == 1.0).all()


def test_backward_square_and_accumulate():
    x = leaf([1.0, 2.0])
    backward(ag.sum(x * x))
    assert list(x.grad) == [2.0, 4.0]
    backward(ag.sum(x * x))
    assert list(x.grad) == [4.0, 8.0]


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(NonScalarLoss):
        backward(x * x)


def test_shared_subexpression():
    # y = x*x used twice: d/dx (y + y) = 4x
    x = leaf([3.0])
    y = x * x
    backward(ag.sum(y + y))
    assert x.grad[0] == 12.0


def test_gradient_check_square():
    x = leaf([3.0])
    assert gradient_check(lambda: ag.sum(x * x), [x], 1e-5) < 1e-8


def test_gradient_check_linear_ce():
    rng = np.random.default_rng(0)
    w, b = leaf(rng.standard_normal((5, 3))), leaf(rng.standard_normal(3))
    x = rng.standard_normal((4, 5))
    t = np.array([0, 2, 1, 1])
    f = lambda: ag.sum(ag.cross_entropy(Tensor(x) @ w + b, t))  # noqa: E731
    assert gradient_check(f, [w, b]) < 1e-6


def test_gradient_check_zero_function():
    x = leaf([1.0, -2.0])
    assert gradient_check(lambda: ag.sum(x * 0.0), [x]) == 0.0


def test_two_layer_mlp():
    rng = np.random.default_rng(1)
    w1, b1 = leaf(rng.standard_normal((6, 8))), leaf(rng.standard_normal(8))
    w2, b2 = leaf(rng.standard_normal((8, 3))), leaf(rng.standard_normal(3))
    x = Tensor(rng.standard_normal((5, 6)))
    t = rng.integers(0, 3, 5)

    def f():
        h = ag.gelu(x @ w1 + b1)
        return ag.mean(ag.cross_entropy(h @ w2 + b2, t))

    assert gradient_check(f, [w1, b1, w2, b2]) < 1e-6


def test_op_suite():
    errs = op_suite(n_shapes=20, seed=0)
    assert set(errs) == set(OPS)
    assert max(errs.values()) < 1e-4, errs


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    assert np.abs(ag.softmax(Tensor(x)).data.sum(axis=-1) - 1).max() <= 1e-12
    s32 = ag.softmax(Tensor(x, dtype=np.float32)).data
    assert s32.dtype == np.float32
    assert np.abs(s32.sum(axis=-1, dtype=np.float64) - 1).max() <= 1e-6


def test_softmax_stable_for_huge_logits():
    out = ag.softmax(Tensor([1e4, 0.0, -1e9])).data
    assert np.isfinite(out).all() and out[0] == 1.0


def test_dropout_eval_is_identity():
    x = leaf(np.arange(6.0))
    assert ag.dropout(x, 0.5, False) is x


def test_dropout_is_reproducible_and_scaled():
    x = Tensor(np.ones(10000))
    a = ag.dropout(x, 0.25, True, ag.DropoutRNG(3)).data
    b = ag.dropout(x, 0.25, True, ag.DropoutRNG(3)).data
    assert (a == b).all()
    assert set(np.unique(a)) <= {0.0, 1 / 0.75}
    assert abs((a == 0).mean() - 0.25) < 0.02


def test_shape_errors():
    with pytest.raises(ShapeMismatch, match="matmul"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeMismatch):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ShapeMismatch):
        ag.cross_entropy(Tensor(np.ones((2, 3))), [0])


def test_index_errors():
    with pytest.raises(IndexOutOfRange):
        ag.embedding(Tensor(np.ones((3, 2))), [0, 3])
    with pytest.raises(IndexOutOfRange):
        ag.cross_entropy(Tensor(np.ones((2, 3))), [0, 3])


def test_precision_is_kept():
    x = Tensor(np.ones((2, 2)), dtype=np.float32)
    y = ag.layer_norm(ag.gelu(x @ x))
    assert y.data.dtype == np.float32
