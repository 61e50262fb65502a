"""Tests for the autodiff engine."""

import numpy as np
import pytest

from dusty_desk.conv import conv2d_circular, conv2d_transposed_circular
from dusty_desk.errors import ConfigError, NumericError
from dusty_desk.tensor import (
    DTYPE,
    Tensor,
    enable_grad,
    gather,
    grad,
    grad_check,
    is_grad_enabled,
    no_grad,
)


def _leaf(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape).astype(DTYPE), requires_grad=True)


def _away_from_kinks(rng, shape):
    """Values at least 0.1 away from 0 and +-0.5, where clamp and leaky ReLU bend."""
    centers = rng.choice([-0.8, -0.3, 0.3, 0.8], size=shape)
    values = centers + rng.uniform(-0.1, 0.1, shape)
    return Tensor(values.astype(DTYPE), requires_grad=True)


def _adjoint_gap(f, x, rng):
    """|<J v, u> - <v, J^T u>| relative, from one forward/backward pair.

    J v is a central difference taken along the float32-rounded step that was
    actually applied to ``x``.
    """
    y = f(x)
    u = rng.standard_normal(y.shape).astype(DTYPE)
    (jtu,) = grad((y * Tensor(u)).sum(), [x])
    v = rng.standard_normal(x.shape)
    eps = 2e-3
    upper = (x.data + eps * v).astype(DTYPE)
    lower = (x.data - eps * v).astype(DTYPE)
    step = upper.astype(np.float64) - lower.astype(np.float64)
    with no_grad():
        plus = f(Tensor(upper)).data.astype(np.float64)
        minus = f(Tensor(lower)).data.astype(np.float64)
    lhs = float(np.sum((plus - minus) * u)) / (2 * eps)
    rhs = float(np.sum(step * jtu.data)) / (2 * eps)
    return abs(lhs - rhs) / max(1.0, abs(rhs))


_KERNELS = np.random.default_rng(13)
CONV_KERNEL = Tensor(_KERNELS.standard_normal((3, 2, 3, 3)).astype(DTYPE))
TRANSPOSED_KERNEL = Tensor(_KERNELS.standard_normal((2, 1, 4, 4)).astype(DTYPE))


UNARY_OPS = {
    "exp": lambda t: t.exp(),
    "tanh": lambda t: t.tanh(),
    "sigmoid": lambda t: t.sigmoid(),
    "softplus": lambda t: t.softplus(),
    "leaky_relu": lambda t: t.leaky_relu(0.2),
    "square": lambda t: t.square(),
    "pow3": lambda t: t**3,
    "sum_axis": lambda t: t.sum(axis=1),
    "mean_keepdims": lambda t: t.mean(axis=(0, 2), keepdims=True),
    "reshape": lambda t: t.reshape(4, 6) * 2.0,
    "broadcast": lambda t: t.sum(axis=2, keepdims=True).broadcast_to((2, 3, 4)),
    "getitem": lambda t: t[:, 1:, ::2],
    "clamp": lambda t: t.clamp(-0.5, 0.5),
    "conv2d_circular": lambda t: conv2d_circular(t.reshape(1, 2, 3, 4), CONV_KERNEL, pad_v=1),
    "conv2d_transposed_circular": lambda t: conv2d_transposed_circular(
        t.reshape(1, 2, 3, 4), TRANSPOSED_KERNEL, stride=2, pad_v=1, pad_h=1
    ),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_adjointness(name):
    """Backward is the transpose of the forward linearization."""
    rng = np.random.default_rng(3)
    x = _away_from_kinks(rng, (2, 3, 4))
    assert _adjoint_gap(UNARY_OPS[name], x, rng) < 1e-3


@pytest.mark.parametrize("name", ["exp", "tanh", "sigmoid", "softplus", "square", "pow3"])
def test_grad_check_smooth_ops(name):
    """Analytic gradients agree with central differences for smooth ops."""
    rng = np.random.default_rng(5)
    x = _leaf(rng, (3, 4))
    error = grad_check(lambda t: UNARY_OPS[name](t).sum(), [x], eps=1e-2)
    assert error < 1e-2


def test_log_and_division_gradients():
    """Log and division work on a positive input."""
    rng = np.random.default_rng(7)
    x = _leaf(rng, (5,), 0.5, 2.0)
    error = grad_check(lambda t: (t.log() + 1.0 / t).sum(), [x], eps=1e-3)
    assert error < 1e-2


def test_broadcast_binary_gradients():
    """Gradients of broadcast operands are summed back to their shape."""
    a = Tensor(np.ones((2, 3), dtype=DTYPE), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0], dtype=DTYPE), requires_grad=True)
    (a * b + b).sum().backward()

    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    np.testing.assert_allclose(b.grad, [3.0, 3.0, 3.0])


def test_chain_rule_composite():
    """A composite of several ops passes the finite-difference check."""
    rng = np.random.default_rng(11)
    x = _leaf(rng, (2, 5))
    w = _leaf(rng, (5,))

    def f(x, w):
        return ((x * w).sum(axis=1).tanh().softplus() * 3.0).mean()

    assert grad_check(f, [x, w], eps=1e-2) < 1e-2


def test_gather_negative_index_reads_zero():
    """Gather reads zero at negative indices and scatters gradient back."""
    x = Tensor(np.array([1.0, 2.0, 3.0], dtype=DTYPE), requires_grad=True)
    index = np.array([2, -1, 0, 2])
    out = gather(x, index)
    np.testing.assert_array_equal(out.data, [3.0, 0.0, 1.0, 3.0])

    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 2.0])


def test_double_backward():
    """Gradients built with create_graph can be differentiated again."""
    x = Tensor(np.array([0.3, -0.7], dtype=DTYPE), requires_grad=True)
    (g,) = grad((x * x * x).sum(), [x], create_graph=True)
    np.testing.assert_allclose(g.data, 3 * x.data**2, rtol=1e-5)

    (gg,) = grad(g.sum(), [x])
    np.testing.assert_allclose(gg.data, 6 * x.data, rtol=1e-5)


def test_backward_accumulates_and_releases():
    """Two backward passes add into .grad; the graph is freed afterwards."""
    x = Tensor(np.array([2.0], dtype=DTYPE), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 4.0).sum().backward()
    assert x.grad[0] == pytest.approx(7.0)

    y = (x * x).sum()
    y.backward()
    assert y.is_leaf


def test_no_grad_blocks_recording():
    """Inside no_grad nothing is tracked, and the flag is restored afterwards."""
    x = Tensor(np.ones(3, dtype=DTYPE), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad

    with no_grad():
        with enable_grad():
            z = x * 2.0
    assert z.requires_grad


def test_unused_input_gets_zero_gradient():
    """grad() returns zeros for inputs that do not reach the output."""
    x = Tensor(np.ones(2, dtype=DTYPE), requires_grad=True)
    unused = Tensor(np.ones((3, 3), dtype=DTYPE), requires_grad=True)
    _, g = grad((x * 2.0).sum(), [x, unused])
    np.testing.assert_array_equal(g.data, np.zeros((3, 3)))


def test_non_finite_output_raises():
    """Ops that produce inf or NaN raise NumericError."""
    with pytest.raises(NumericError):
        Tensor(np.array([100.0], dtype=DTYPE)).exp()
    with pytest.raises(NumericError):
        Tensor(np.array([0.0], dtype=DTYPE)).log()


def test_backward_of_non_scalar_needs_seed():
    """A non-scalar backward without grad_output is a configuration error."""
    x = Tensor(np.ones(3, dtype=DTYPE), requires_grad=True)
    with pytest.raises(ConfigError):
        (x * 2.0).backward()
