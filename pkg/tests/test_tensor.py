import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmvae import tensor as T
from dmvae.gradcheck import check_grad, max_rel_error, numerical_grad
from dmvae.tensor import DomainError, ShapeError, Tape, TapeError, Tensor


def grad_of(fn, *values):
    with Tape() as tape:
        ts = [Tensor(np.asarray(v, dtype=float)) for v in values]
        tape.watch(*ts)
        return tape.gradient(fn(*ts), ts)


# --- forward values -------------------------------------------------------------

def test_matmul_hand_arithmetic():
    out = T.matmul([[1, 2], [3, 4]], [[1], [1]])
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_relu_definition():
    np.testing.assert_array_equal(T.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])


def test_logsumexp_of_zeros_is_log_two():
    naive = math.log(math.exp(0.0) + math.exp(0.0))
    assert T.logsumexp_lastdim([0.0, 0.0]).data == pytest.approx(naive, abs=1e-15)
    assert float(T.logsumexp_lastdim([0.0, 0.0]).data) == pytest.approx(0.6931, abs=1e-4)


def test_logsumexp_stable_for_large_inputs():
    out = T.logsumexp_lastdim([1000.0, 1000.0])
    assert float(out.data) == pytest.approx(1000.0 + math.log(2.0))


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(5, 7)) * 30
    np.testing.assert_allclose(T.softmax_lastdim(x).data.sum(axis=-1), 1.0, atol=1e-12)


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid([-800.0, 0.0, 800.0]).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_log_clamps_by_default():
    assert float(T.log([0.0]).data[0]) == pytest.approx(math.log(1e-12))


def test_log_without_clamp_rejects_non_positive():
    with pytest.raises(DomainError):
        T.log([1.0, 0.0], clamp=False)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        T.add(np.ones((2, 3)), np.ones((4,)))


def test_forward_op_dispatch_matches_direct_call():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.forward_op("square", [x]).data, T.square(x).data)
    np.testing.assert_array_equal(T.forward_op("sum", [x], axis=0).data, x.sum(axis=0))


def test_max_lastdim_routes_gradient_to_first_maximiser():
    (g,) = grad_of(lambda x: T.sum(T.max_lastdim(x)), [[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]])
    np.testing.assert_array_equal(g, [[0, 1, 0], [1, 0, 0]])


# --- backward -----------------------------------------------------------------

def test_sum_of_squares_gradient():
    (g,) = grad_of(lambda x: T.sum(T.square(x)), [1.0, 2.0])
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_sigmoid_gradient_at_zero():
    (g,) = grad_of(lambda x: T.sigmoid(x), 0.0)
    assert float(g) == 0.25


def test_gradients_accumulate_over_repeated_use():
    (g,) = grad_of(lambda x: T.sum(x * x + x), [3.0])
    np.testing.assert_array_equal(g, [7.0])


def test_unused_leaf_gets_exact_zero():
    ga, gb = grad_of(lambda a, b: T.sum(a * 2.0), [1.0, 2.0], [5.0, 6.0])
    np.testing.assert_array_equal(gb, [0.0, 0.0])
    np.testing.assert_array_equal(ga, [2.0, 2.0])


def test_backward_requires_scalar_loss():
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        tape.watch(x)
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(x * 2.0)


def test_backward_requires_active_tape():
    with pytest.raises(TapeError):
        T.backward(Tensor(1.0))


def test_tape_nodes_are_topological():
    with Tape() as tape:
        x = Tensor(np.ones(3))
        tape.watch(x)
        y = T.sum(T.exp(x) * x)
        tape.backward(y)
    for k, node in enumerate(tape.nodes):
        assert all(i < k for i in node.inputs)


def test_forward_is_bit_identical_across_runs():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(8, 5)), rng.normal(size=(5, 4))

    def run():
        return T.sum(T.log_softmax_lastdim(T.relu(T.matmul(a, b)))).data

    assert run().tobytes() == run().tobytes()


# --- finite differences over every op -----------------------------------------

RNG = np.random.default_rng(1234)


def _u(*shape):
    return RNG.uniform(-2, 2, size=shape)


def _pos(*shape):
    return RNG.uniform(0.2, 2, size=shape)


W35 = _u(3, 5)
P35 = _pos(3, 5)

OP_CASES = {
    "add": (lambda a, b: T.sum(T.add(a, b) * np.arange(12.0).reshape(3, 4)), [_u(3, 4), _u(4)]),
    "sub": (lambda a, b: T.sum(T.square(T.sub(a, b))), [_u(3, 4), _u(3, 1)]),
    "mul": (lambda a, b: T.sum(T.mul(a, b)), [_u(3, 4), _u(3, 4)]),
    "div": (lambda a, b: T.sum(T.div(a, b)), [_u(3, 4), _pos(3, 4)]),
    "matmul": (lambda a, b: T.sum(T.square(T.matmul(a, b))), [_u(3, 4), _u(4, 2)]),
    "neg": (lambda a: T.sum(T.neg(a) * a), [_u(5)]),
    "relu": (lambda a: T.sum(T.relu(a) * a), [_u(4, 3)]),
    "sigmoid": (lambda a: T.sum(T.sigmoid(a)), [_u(4, 3)]),
    "exp": (lambda a: T.sum(T.exp(a)), [_u(4, 3)]),
    "log": (lambda a: T.sum(T.log(a)), [_pos(4, 3)]),
    "square": (lambda a: T.sum(T.square(a)), [_u(4, 3)]),
    "clip": (lambda a: T.sum(T.clip(a, -1.0, 1.0) * a), [_u(4, 3)]),
    "sum": (lambda a: T.sum(T.square(T.sum(a, axis=0))), [_u(4, 3)]),
    "mean": (lambda a: T.sum(T.square(T.mean(a, axis=1))), [_u(4, 3)]),
    "broadcast": (lambda a: T.sum(T.square(T.broadcast(a, (3, 4)))), [_u(4)]),
    "reshape": (lambda a: T.sum(T.reshape(a, (2, 6)) * np.arange(12.0).reshape(2, 6)), [_u(3, 4)]),
    "transpose": (lambda a: T.sum(T.transpose(a) * np.arange(12.0).reshape(4, 3)), [_u(3, 4)]),
    "concat": (lambda a, b: T.sum(T.square(T.concat([a, b], axis=-1))), [_u(2, 3), _u(2, 2)]),
    "slice": (lambda a: T.sum(T.square(a[np.array([0, 2, 2])])), [_u(4, 3)]),
    "max_lastdim": (lambda a: T.sum(T.max_lastdim(a) * np.array([1.0, 2.0, 3.0])),
                    [np.array([[0.1, 1.5, -0.3], [1.2, 0.4, 0.0], [-1.0, -0.5, 0.7]])]),
    "logsumexp_lastdim": (lambda a: T.sum(T.logsumexp_lastdim(a) * np.arange(1.0, 4.0)), [_u(3, 5)]),
    "softmax_lastdim": (lambda a: T.sum(T.softmax_lastdim(a) * W35), [_u(3, 5)]),
    "log_softmax_lastdim": (lambda a: T.sum(T.log_softmax_lastdim(a) * P35), [_u(3, 5)]),
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(kind):
    fn, args = OP_CASES[kind]
    assert check_grad(fn, args, step=1e-5) < 1e-4


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_composite_gradient_property(x):
    fn = lambda a: T.sum(T.logsumexp_lastdim(T.sigmoid(a) * 3.0)) + T.sum(T.square(a)) * 0.1
    analytic = grad_of(fn, x)
    numeric = numerical_grad(fn, [x])
    np.testing.assert_allclose(analytic[0], numeric[0], rtol=1e-4, atol=1e-7)


def test_max_rel_error_reports_relative_gap():
    assert max_rel_error([np.array([1.0, 2.0])], [np.array([1.0, 2.2])]) == pytest.approx(0.2 / 2.2)
