import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farbar import tensor as T
from farbar.tensor import ShapeError, Tape, TapeError, Tensor

from oracles import central_diff, naive_conv1d, naive_conv_transpose1d, naive_dft_magnitude

RNG = np.random.default_rng(1234)


def grad_check(fn, *arrays, rtol=1e-5, atol=1e-7):
    """Compare tape gradients of ``sum(fn(*tensors) * probe)`` with central differences."""
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    probe = RNG.standard_normal(out.shape)

    def scalar():
        return float(np.sum(fn(*tensors).data * probe))

    _, grads = T.gradients(lambda: T.tsum(T.mul(fn(*tensors), probe)), tensors)
    for t, g in zip(tensors, grads):
        fd = central_diff(scalar, t.data)
        np.testing.assert_allclose(g, fd, rtol=rtol, atol=atol)


UNARY = {
    "exp": T.exp,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "mish": T.mish,
    "square": T.square,
    "neg": T.neg,
    "softmax": lambda a: T.softmax(a, axis=1),
    "log_softmax": lambda a: T.log_softmax(a, axis=1),
    "mean_axis": lambda a: T.mean(a, axis=-1, keepdims=True),
    "sum_axes": lambda a: T.tsum(a, axis=(0, 2)),
    "transpose": lambda a: T.transpose(a, (2, 0, 1)),
    "reshape": lambda a: T.reshape(a, (3, 10)),
    "getitem": lambda a: T.getitem(a, (Ellipsis, slice(1, 4))),
    "gather": lambda a: T.gather(a, np.array([[0, 4, 4], [1, 1, 3]])),
    "group2": lambda a: T.group(T.getitem(a, (Ellipsis, slice(0, 4))), 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name):
    grad_check(UNARY[name], RNG.standard_normal((2, 3, 5)))


def test_positive_domain_gradients():
    x = RNG.uniform(0.5, 2.0, (3, 4))
    for fn in (T.log, T.sqrt, T.tabs):
        grad_check(fn, x)
    grad_check(lambda a: T.maximum(a, 1.0), x + 0.01)


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div, T.gated_activation])
def test_binary_gradients(op):
    a = RNG.standard_normal((2, 3, 4))
    b = RNG.uniform(0.5, 1.5, (2, 3, 4))
    grad_check(op, a, b)


def test_broadcast_gradients_are_reduced():
    grad_check(T.mul, RNG.standard_normal((2, 3, 4)), RNG.standard_normal((3, 1)))
    grad_check(T.add, RNG.standard_normal((2, 3, 4)), RNG.standard_normal((4,)))


def test_fused_losses_gradients():
    target = RNG.integers(0, 6, (2, 5))
    grad_check(lambda a: T.cross_entropy(a, target), RNG.standard_normal((2, 6, 5)))
    bits = RNG.integers(0, 2, (2, 1, 5))
    grad_check(lambda a: T.bce_with_logits(a, bits), RNG.standard_normal((2, 1, 5)))


def test_cross_entropy_value():
    logits = RNG.standard_normal((1, 4, 3))
    target = np.array([[0, 3, 2]])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean([np.log(p[0, target[0, t], t]) for t in range(3)])
    assert float(T.cross_entropy(Tensor(logits), target).data) == pytest.approx(expected, rel=1e-12)


def test_bce_is_stable_for_large_logits():
    out = T.bce_with_logits(Tensor(np.array([[[800.0, -800.0]]])), np.array([[[1, 0]]]))
    assert float(out.data) == pytest.approx(0.0, abs=1e-12)


def test_concat_and_slice_gradients():
    grad_check(lambda a, b: T.concat([a, b]), RNG.standard_normal((2, 3, 4)), RNG.standard_normal((2, 1, 4)))
    grad_check(lambda a: T.slice_channels(a, 1, 3), RNG.standard_normal((2, 4, 3)))


@pytest.mark.parametrize("dilation,k", [(1, 1), (1, 3), (2, 3), (4, 5)])
def test_conv1d_matches_naive_loop(dilation, k):
    x = RNG.standard_normal((3, 11))
    w = RNG.standard_normal((2, 3, k))
    b = RNG.standard_normal(2)
    out = T.conv1d(Tensor(x), Tensor(w), Tensor(b), dilation=dilation).data
    np.testing.assert_allclose(out, naive_conv1d(x, w, b, dilation), rtol=1e-12, atol=1e-12)


def test_conv1d_gradients():
    grad_check(lambda x, w, b: T.conv1d(x, w, b, dilation=2),
               RNG.standard_normal((2, 3, 9)), RNG.standard_normal((4, 3, 3)), RNG.standard_normal(4))


@pytest.mark.parametrize("stride,k", [(1, 1), (2, 4), (5, 10), (3, 5)])
def test_conv_transpose_matches_naive_loop(stride, k):
    x = RNG.standard_normal((3, 6))
    w = RNG.standard_normal((3, 2, k))
    b = RNG.standard_normal(2)
    out = T.conv_transpose1d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    assert out.shape == (2, 6 * stride)
    np.testing.assert_allclose(out, naive_conv_transpose1d(x, w, b, stride), rtol=1e-12, atol=1e-12)


def test_conv_transpose_gradients():
    grad_check(lambda x, w, b: T.conv_transpose1d(x, w, b, stride=5),
               RNG.standard_normal((2, 3, 4)), RNG.standard_normal((3, 2, 10)), RNG.standard_normal(2))


def test_conv_shape_errors_name_the_axis():
    with pytest.raises(ShapeError, match="channel axis"):
        T.conv1d(Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 4, 3))))
    with pytest.raises(ShapeError, match="odd"):
        T.conv1d(Tensor(np.zeros((4, 8))), Tensor(np.zeros((2, 4, 2))))


def test_rfft_magnitude_matches_naive_dft():
    frame = RNG.standard_normal(12)
    out = T.rfft_magnitude(Tensor(frame), 16).data
    np.testing.assert_allclose(out, naive_dft_magnitude(frame, 16), rtol=1e-10)


def test_rfft_magnitude_gradient():
    grad_check(lambda a: T.rfft_magnitude(a, 16), RNG.standard_normal((2, 3, 16)), rtol=1e-4, atol=1e-6)
    grad_check(lambda a: T.rfft_magnitude(a, 15), RNG.standard_normal((2, 15)), rtol=1e-4, atol=1e-6)


def test_rfft_magnitude_gradient_finite_at_zero():
    x = Tensor(np.zeros(8), requires_grad=True)
    _, (g,) = T.gradients(lambda: T.tsum(T.rfft_magnitude(x, 8)), [x])
    assert np.all(np.isfinite(g))


def test_linear_map_uses_adjoint():
    m = RNG.standard_normal((4, 3))
    grad_check(lambda a: T.linear_map(a, lambda v: v @ m.T, lambda g: g @ m), RNG.standard_normal((2, 3)))


def test_scalar_values_against_mpmath():
    gate = float(T.gated_activation(Tensor(np.array(1.0)), Tensor(np.array(1.0))).data)
    assert gate == pytest.approx(float(mpmath.tanh(1) / (1 + mpmath.exp(-1))), rel=1e-14)
    m = float(T.mish(Tensor(np.array(-1.0))).data)
    assert m == pytest.approx(float(-mpmath.tanh(mpmath.log(1 + mpmath.exp(-1)))), rel=1e-14)
    sp = float(T.softplus(Tensor(np.array(30.0))).data)
    assert sp == pytest.approx(float(mpmath.log(1 + mpmath.exp(30))), rel=1e-14)


def test_extreme_inputs_do_not_overflow():
    x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    with np.errstate(over="raise", invalid="raise"):
        for fn in (T.sigmoid, T.softplus, T.mish, T.tanh):
            assert np.all(np.isfinite(fn(x).data))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.sampled_from([1, 2, 3, 5]))
def test_group_then_ungroup_is_identity(b, c, t, g):
    x = RNG.standard_normal((b, c, t * g))
    y = T.group(Tensor(x), g)
    assert y.shape == (b, c * g, t)
    np.testing.assert_array_equal(T.ungroup(y, g).data, x)


def test_group_layout():
    x = np.arange(12.0).reshape(1, 2, 6)
    y = T.group(Tensor(x), 3).data
    # channel c*g + j at step t holds input [c, t*g + j]
    for c in range(2):
        for j in range(3):
            for t in range(2):
                assert y[0, c * 3 + j, t] == x[0, c, t * 3 + j]


def test_backward_twice_raises():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.square(a))
    tape.backward(loss)
    with pytest.raises(TapeError, match="already"):
        tape.backward(loss)
    tape.reset()


def test_loss_not_on_tape_raises():
    a = Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(a)
    with Tape() as tape:
        pass
    with pytest.raises(TapeError, match="not on this tape"):
        tape.backward(loss)


def test_non_scalar_loss_raises():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.square(a)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(y)


def test_untracked_inputs_are_not_recorded():
    with Tape() as tape:
        T.exp(Tensor(np.ones(3)))
        with T.no_tape():
            T.exp(Tensor(np.ones(3), requires_grad=True))
    assert tape.nodes == []


def test_intermediate_gradient_requested():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        mid = T.mul(a, 3.0)
        loss = T.tsum(T.square(mid))
    g = tape.backward(loss, wrt=[mid])
    np.testing.assert_allclose(g[mid], 2 * mid.data)
    np.testing.assert_allclose(g[a], 18 * a.data)


def test_stop_gradient_blocks_flow():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    _, (g,) = T.gradients(lambda: T.tsum(T.mul(T.stop_gradient(a), a)), [a])
    np.testing.assert_allclose(g, a.data)
