import io

import numpy as np
import pytest

from csasr.errors import NumericError, ShapeError, TapeError, UsageError
from csasr.numerics import Tape, Tensor, finite_diff_check, ops, read_array, write_array
from csasr.numerics.gradcheck import analytic_grad

from gradcases import CASES


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(1234)
    for _ in range(20):
        f, x = CASES[name](rng)
        assert finite_diff_check(f, x, h=1e-5) < 1e-4, name


def test_softmax_symmetric_pair():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = rng.uniform(-50, 50, size=(200, 17))
    p = ops.softmax(Tensor(x)).data
    assert (p >= 0).all()
    assert np.abs(p.sum(-1) - 1).max() <= 1e-12


def test_log_softmax_is_log_of_softmax():
    rng = np.random.default_rng(1)
    x = rng.uniform(-30, 30, size=(100, 9))
    np.testing.assert_allclose(ops.log_softmax(Tensor(x)).data, np.log(ops.softmax(Tensor(x)).data), atol=1e-10)


def test_concat_posterior_width():
    y = ops.concat_last_dim([Tensor(np.zeros((3, 256))), Tensor(np.zeros((3, 3)))])
    assert y.shape == (3, 259)


def test_matmul_identity():
    a = np.random.default_rng(2).normal(size=(4, 4))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(4)), Tensor(a)).data, a)


def test_sum_gradient_is_ones():
    g = analytic_grad(lambda t: ops.sum(t), np.arange(5.0))
    np.testing.assert_array_equal(g, np.ones(5))


def test_sum_of_softmax_has_zero_gradient():
    g = analytic_grad(lambda t: ops.sum(ops.softmax(t)), np.random.default_rng(3).normal(size=6))
    assert np.abs(g).max() < 1e-15


def test_square_at_three():
    assert analytic_grad(lambda t: ops.sum(ops.square(t)), np.array([3.0]))[0] == 6.0
    assert finite_diff_check(lambda t: ops.sum(ops.square(t)), np.array([3.0])) < 1e-8


def test_log_softmax_pick():
    x = np.random.default_rng(4).normal(size=7)
    assert finite_diff_check(lambda t: ops.pick_last(ops.log_softmax(t), np.array(2)), x) < 1e-6


def test_layer_norm_sum_of_squares():
    x = np.random.default_rng(5).normal(size=(4, 8))
    g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
    assert finite_diff_check(lambda t: ops.sum(ops.square(ops.layer_norm(t, g, b))), x) < 1e-5


def test_backward_is_deterministic():
    rng = np.random.default_rng(6)
    f, x = CASES["composed_attention"](rng)
    a = analytic_grad(f, x)
    b = analytic_grad(f, x)
    assert a.tobytes() == b.tobytes()


def test_unreachable_leaf_gets_zero_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(a)
        ops.mul(a, b)  # recorded but not part of loss
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, np.zeros(3))
    np.testing.assert_array_equal(a.grad, np.ones(3))


def test_shared_input_accumulates():
    g = analytic_grad(lambda t: ops.sum(ops.mul(t, t)), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_backward_on_detached_tensor_raises():
    with pytest.raises(TapeError):
        Tensor(np.ones(1), requires_grad=True).backward()
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape():
        y = ops.sum(x)
    with pytest.raises(TapeError):
        y.detach().backward()


def test_backward_needs_scalar_and_single_use():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
        s = ops.sum(y)
    with pytest.raises(TapeError):
        tape.backward(y)
    tape.backward(s)
    with pytest.raises(TapeError):
        tape.backward(s)


def test_retained_tape_can_be_reused():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        s = ops.sum(ops.scale(x, 2.0))
    tape.backward(s, retain=True)
    tape.backward(s)
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_shape_errors_mention_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 5\]"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        ops.concat_last_dim([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_names_op():
    with pytest.raises(NumericError, match="exp"):
        ops.exp(Tensor(np.array([1000.0])))


def test_finite_diff_check_validates_arguments():
    with pytest.raises(UsageError):
        finite_diff_check(lambda t: ops.sum(t), np.ones(2), h=1e-2)
    with pytest.raises(UsageError):
        finite_diff_check(lambda t: ops.scale(t, 1.0), np.ones(2))


def test_serialization_round_trip():
    a = np.random.default_rng(7).normal(size=(3, 4, 2))
    buf = io.BytesIO()
    write_array(buf, a)
    assert buf.getvalue().startswith(b"shape: 3 4 2\n")
    buf.seek(0)
    b = read_array(buf)
    assert b.tobytes() == a.tobytes() and b.shape == a.shape


def test_dropout_scales_kept_units():
    x = Tensor(np.ones((2, 4)))
    mask = np.array([[True, False, True, True], [False, False, True, True]])
    y = ops.dropout(x, mask, 0.5)
    np.testing.assert_array_equal(y.data, mask * 2.0)
