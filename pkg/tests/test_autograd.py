import numpy as np
import pytest

from smalldepth import autograd as ag
from smalldepth.tensor import ConvSpec

RTOL = 1e-6


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def grad_check(op, x, seed=0):
    """Tape gradient of sum(op(x) * r) against central differences (float64)."""
    x = np.asarray(x, dtype=np.float64)
    r = np.random.default_rng(seed).normal(size=np.shape(op(x)))

    def f(v):
        return np.sum(op(v) * r)

    tape = ag.GradTape()
    loss = ag.reduce_sum(ag.mul(op(tape.leaf("x", x)), r))
    g = tape.backward(loss)["x"]
    return rel_err(g, ag.finite_difference_grad(f, x))


gen = np.random.default_rng(42)
X = gen.normal(size=(2, 3, 4, 5))
POS = gen.uniform(0.5, 2.0, size=(2, 3, 4, 5))
OTHER = gen.normal(size=(1, 3, 1, 5))

UNARY = {
    "add": (lambda v: ag.add(v, OTHER), X),
    "sub": (lambda v: ag.sub(OTHER, v), X),
    "mul": (lambda v: ag.mul(v, OTHER), X),
    "div_num": (lambda v: ag.div(v, POS), X),
    "div_den": (lambda v: ag.div(OTHER, v), POS),
    "exp": (ag.exp, X),
    "log": (ag.log, POS),
    "sqrt": (ag.sqrt, POS),
    "abs": (ag.abs, X),
    "relu": (ag.relu, X),
    "sigmoid": (ag.sigmoid, X),
    "sum_axes": (lambda v: ag.reduce_sum(v, ("height", "width")), X),
    "mean": (lambda v: ag.reduce_mean(v, "channel"), X),
    "var": (lambda v: ag.reduce_var(v, ("channel", "width")), X),
    "reshape": (lambda v: ag.reshape(v, (2, 12, 5)), X),
    "flip": (lambda v: ag.flip(v, "width"), X),
    "diff_h": (lambda v: ag.diff(v, "height"), X),
    "log_softmax": (lambda v: ag.log_softmax(v, "width"), X),
    "softmax": (lambda v: ag.softmax(v, "channel"), X),
    "resize": (lambda v: ag.bilinear_resize(v, 7, 3), X),
    "pad_kernel": (lambda v: ag.pad_kernel(v, 6, 9), X),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_elementwise_and_reduction_grads(name):
    op, x = UNARY[name]
    assert grad_check(op, x) <= RTOL


SPECS = [
    ConvSpec.same(3, 4, 3),
    ConvSpec.same(4, 4, 3, groups=4, dilation=2),
    ConvSpec(4, 2, 2, 3, groups=2, stride=(2, 1), padding=(1, 0)),
    ConvSpec.same(3, 6, 5, 1, groups=3, stride=2),
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.c_in}-{s.c_out}-{s.k_h}x{s.k_w}-g{s.groups}")
def test_conv_grads_all_arguments(spec):
    g = np.random.default_rng(7)
    x = g.normal(size=(2, spec.c_in, 6, 7))
    w = g.normal(size=spec.weight_shape)
    b = g.normal(size=(spec.c_out,))
    assert grad_check(lambda v: ag.conv2d(v, w, spec, b), x) <= RTOL
    assert grad_check(lambda v: ag.conv2d(x, v, spec, b), w) <= RTOL
    assert grad_check(lambda v: ag.conv2d(x, w, spec, v), b) <= RTOL


def test_shared_leaf_accumulates():
    x = np.array([1.0, 2.0, 3.0])
    tape = ag.GradTape()
    v = tape.leaf("x", x)
    loss = ag.reduce_sum(ag.mul(v, v))
    np.testing.assert_allclose(tape.backward(loss)["x"], 2 * x)


def test_leaf_dedup_and_unreached_leaves():
    tape = ag.GradTape()
    a = tape.leaf("a", np.ones(3))
    assert tape.leaf("a", np.zeros(3)) is a
    tape.leaf("unused", np.ones((2, 2)))
    grads = tape.backward(ag.reduce_sum(a))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_tape_errors():
    tape = ag.GradTape()
    v = tape.leaf("x", np.ones(3))
    with pytest.raises(ag.TapeError):
        tape.backward(ag.mul(v, 2.0))  # not scalar
    loss = ag.reduce_sum(v)
    tape.backward(loss)
    with pytest.raises(ag.TapeError):
        tape.backward(loss)
    with pytest.raises(ag.TapeError):
        ag.mul(v, 2.0)
    other = ag.GradTape()
    with pytest.raises(ag.TapeError):
        ag.add(other.leaf("y", np.ones(3)), ag.GradTape().leaf("z", np.ones(3)))


def test_plain_arrays_pass_through():
    y = ag.mul(np.ones(3, dtype=np.float32), 0.5)
    assert isinstance(y, np.ndarray) and y.dtype == np.float32


def test_operator_overloads():
    tape = ag.GradTape()
    v = tape.leaf("x", np.array([1.0, 2.0]))
    loss = ag.reduce_sum((v * 3.0 - 1.0) / 2.0 + (-v))
    np.testing.assert_allclose(tape.backward(loss)["x"], [0.5, 0.5])
