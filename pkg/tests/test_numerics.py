import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from phrasealign import numerics as nx


def t(data, grad=False):
    return nx.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = t([[2.0, -1.0], [0.5, 3.0]])
    eye = t(np.eye(2))
    assert np.array_equal(nx.matmul(eye, m).data, m.data)


def test_matmul_hand():
    y = nx.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[1.0], [1.0]]))
    assert np.array_equal(y.data, [[3.0], [7.0]])


def test_matmul_zeros():
    y = nx.matmul(t(np.zeros((3, 4))), t(np.ones((4, 2))))
    assert np.array_equal(y.data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        nx.matmul(t(np.ones((2, 3))), t(np.ones((2, 2))))


def test_matmul_associativity():
    rng = nx.Rng(7)
    a, b, c = (t(rng.normal((4, 5))), t(rng.normal((5, 6))), t(rng.normal((6, 3))))
    left = nx.matmul(nx.matmul(a, b), c).data
    right = nx.matmul(a, nx.matmul(b, c)).data
    assert np.abs(left - right).max() < 1e-10


# ---------------------------------------------------------------------------
# row_softmax


def test_row_softmax_uniform():
    y = nx.row_softmax(t([[0.0, 0.0, 0.0]]))
    assert np.allclose(y.data, 1.0 / 3.0)


def test_row_softmax_hand():
    y = nx.row_softmax(t([[math.log(1.0), math.log(3.0)]]))
    assert np.allclose(y.data, [[0.25, 0.75]], atol=1e-12)


def test_row_softmax_no_overflow():
    y = nx.row_softmax(t([[1000.0, 0.0]]))
    assert np.all(np.isfinite(y.data))
    assert y.data[0, 0] > 1.0 - 1e-12
    assert y.data[0, 1] < 1e-12
    assert np.all(y.data >= 0.0) and np.all(y.data <= 1.0)


# logit gaps below ~30 keep every entry strictly inside (0, 1) at float64;
# beyond that the tails round to exact 0/1 (see the overflow test above)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-14, 14)))
def test_row_softmax_rows_are_distributions(x):
    y = nx.row_softmax(t(x)).data
    assert np.abs(y.sum(axis=1) - 1.0).max() <= 1e-9
    assert np.all(y > 0.0) and np.all(y < 1.0)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_hand():
    loss = nx.cross_entropy_logits(t([0.0, 0.0]), 0)
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_cross_entropy_saturated():
    loss = nx.cross_entropy_logits(t([10.0, -10.0]), 0)
    assert loss.item() < 1e-8


def test_cross_entropy_shift_invariance():
    z = np.array([0.3, -1.2, 2.0])
    a = nx.cross_entropy_logits(t(z), 1).item()
    b = nx.cross_entropy_logits(t(z + 123.0), 1).item()
    assert abs(a - b) < 1e-9


def test_cross_entropy_bad_index():
    with pytest.raises(IndexError):
        nx.cross_entropy_logits(t([0.0, 0.0]), 2)


def test_bce_logit_values():
    assert abs(nx.binary_cross_entropy_logit(t(0.0), 1.0).item() - math.log(2.0)) < 1e-12
    assert nx.binary_cross_entropy_logit(t(20.0), 1.0).item() < 1e-8
    assert nx.binary_cross_entropy_logit(t(-500.0), 0.0).item() < 1e-12


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = t([1.0, 2.0, 3.0], grad=True)
    nx.backward(nx.sum_all(x))
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_product_rule():
    x = t([1.0, 2.0], grad=True)
    y = t([3.0, 4.0], grad=True)
    nx.backward(nx.dot(x, y))
    assert np.array_equal(x.grad, [3.0, 4.0])
    assert np.array_equal(y.grad, [1.0, 2.0])


def test_backward_unreachable_node_stays_zero():
    x = t([1.0, 2.0], grad=True)
    other = t([5.0], grad=True)
    nx.backward(nx.sum_all(x))
    assert np.array_equal(other.grad, [0.0])


def test_backward_requires_scalar_root():
    x = t([1.0, 2.0], grad=True)
    with pytest.raises(nx.ShapeError):
        nx.backward(nx.mul(x, x))


def test_backward_repeat_requires_reset():
    x = t([1.0, 2.0], grad=True)
    root = nx.sum_all(x)
    nx.backward(root)
    with pytest.raises(nx.GradientStateError):
        nx.backward(root)


def test_backward_stale_leaf_detected():
    x = t([1.0, 2.0], grad=True)
    nx.backward(nx.sum_all(x))
    with pytest.raises(nx.GradientStateError):
        nx.backward(nx.sum_all(nx.mul(x, x)))
    nx.zero_grads([x])
    nx.backward(nx.sum_all(nx.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_no_grad_allocates_nothing():
    x = t([1.0, 2.0], grad=True)
    with nx.no_grad():
        y = nx.sum_all(nx.mul(x, x))
    assert y.parents == () and y.grad is None and not y.requires_grad


def test_nonfinite_rejected():
    with pytest.raises(nx.NonFiniteError):
        nx.Tensor([np.inf, 1.0])
    with pytest.raises(nx.NonFiniteError):
        nx.div(t([1.0]), t([0.0]))


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_sum_of_squares():
    x = t([1.0, 2.0, 3.0])
    err = nx.finite_diff_check(lambda v: nx.sum_all(nx.mul(v, v)), x, eps=1e-5)
    assert err < 1e-6


def test_finite_diff_constant():
    x = t([1.0, 2.0])
    err = nx.finite_diff_check(lambda v: nx.mul(nx.sum_all(v), 0.0), x)
    assert err == 0.0


def test_finite_diff_softmax_cross_entropy():
    rng = nx.Rng(3)
    x = t(rng.normal(6))
    err = nx.finite_diff_check(lambda v: nx.cross_entropy_logits(v, 2), x)
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_finite_diff_layer_norm(seed):
    rng = nx.Rng(seed)
    x = t(rng.normal((3, 5)))
    gain = t(rng.normal(5, 0.5) + 1.0)
    bias = t(rng.normal(5, 0.5))
    err = nx.finite_diff_check(
        lambda v: nx.sum_all(nx.tanh(nx.layer_norm_rows(v, gain, bias))), x)
    assert err < 1e-6


def test_finite_diff_composite_ops():
    rng = nx.Rng(11)
    x = t(rng.normal((4, 3)))

    def f(v):
        y = nx.row_softmax(nx.matmul(v, nx.transpose(v)))
        z = nx.l2_normalize_rows(nx.tanh(y))
        return nx.mean_all(nx.mul(z, z + 1.0))

    assert nx.finite_diff_check(f, x) < 1e-6


# ---------------------------------------------------------------------------
# invariant: autodiff matches finite differences on every primitive loss


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_random_small_graphs(seed):
    rng = nx.Rng(100 + seed)
    w = t(rng.normal((6, 4)))

    def f(v):
        h = nx.tanh(nx.matmul(v, w))
        s = nx.row_softmax(h)
        return nx.cross_entropy_logits(nx.take_row(s, 0), seed % 4)

    x = t(rng.normal((2, 6)))
    assert nx.finite_diff_check(f, x) < 1e-6


# ---------------------------------------------------------------------------
# rng


def test_rng_bitwise_reproducible():
    a = nx.Rng(1234).normal(1000)
    b = nx.Rng(1234).normal(1000)
    assert np.array_equal(a, b)


def test_rng_children_deterministic():
    a = nx.Rng(5).child().normal(10)
    b = nx.Rng(5).child().normal(10)
    assert np.array_equal(a, b)


def test_truncated_normal_bounded():
    x = nx.Rng(9).truncated_normal((1000,), scale=0.02)
    assert np.abs(x).max() <= 0.04 + 1e-15
