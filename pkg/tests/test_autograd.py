"""Autograd engine: per-primitive gradient checks and contract cases."""
import numpy as np
import pytest

from seq2bold import autograd as ag
from seq2bold.autograd import Tensor, no_grad
from seq2bold.errors import GradCheckError
from seq2bold.gradcheck import grad_check

N_TRIALS = 20


def _rand_param(rng, shape):
    return ag.parameter(rng.normal(size=shape))


def _weighted_sum(t, w):
    # Scalarize with fixed random weights so every output coordinate matters.
    return (t * Tensor(w)).sum()


PRIMITIVES = {}


def primitive(name):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


@primitive("add_broadcast")
def _(rng):
    a = _rand_param(rng, (3, 4))
    b = _rand_param(rng, (4,))
    w = rng.normal(size=(3, 4))
    return lambda: _weighted_sum(ag.add(a, b), w), [a, b]


@primitive("mul_broadcast")
def _(rng):
    a = _rand_param(rng, (2, 3, 4))
    b = _rand_param(rng, (1, 3, 1))
    w = rng.normal(size=(2, 3, 4))
    return lambda: _weighted_sum(ag.mul(a, b), w), [a, b]


@primitive("div")
def _(rng):
    a = _rand_param(rng, (3, 4))
    b = ag.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return lambda: _weighted_sum(ag.div(a, b), w), [a, b]


@primitive("matmul_batched")
def _(rng):
    a = _rand_param(rng, (2, 3, 4))
    b = _rand_param(rng, (2, 4, 5))
    w = rng.normal(size=(2, 3, 5))
    return lambda: _weighted_sum(ag.matmul(a, b), w), [a, b]


@primitive("matmul_broadcast_kv")
def _(rng):
    # (B, h, T, hd) @ (1, h, hd, S): the summary cross-attention pattern.
    a = _rand_param(rng, (3, 2, 4, 5))
    b = _rand_param(rng, (1, 2, 5, 3))
    w = rng.normal(size=(3, 2, 4, 3))
    return lambda: _weighted_sum(ag.matmul(a, b), w), [a, b]


@primitive("linear")
def _(rng):
    x = _rand_param(rng, (2, 5, 3))
    wp = _rand_param(rng, (3, 4))
    b = _rand_param(rng, (4,))
    w = rng.normal(size=(2, 5, 4))
    return lambda: _weighted_sum(ag.linear(x, wp, b), w), [x, wp, b]


@primitive("layer_norm")
def _(rng):
    x = _rand_param(rng, (4, 6))
    g = _rand_param(rng, (6,))
    b = _rand_param(rng, (6,))
    w = rng.normal(size=(4, 6))
    return lambda: _weighted_sum(ag.layer_norm(x, g, b, 1e-5), w), [x, g, b]


@primitive("softmax")
def _(rng):
    x = _rand_param(rng, (3, 5))
    w = rng.normal(size=(3, 5))
    return lambda: _weighted_sum(ag.softmax(x), w), [x]


@primitive("gelu")
def _(rng):
    x = _rand_param(rng, (4, 4))
    w = rng.normal(size=(4, 4))
    return lambda: _weighted_sum(ag.gelu(x), w), [x]


@primitive("exp_sqrt_pow")
def _(rng):
    x = ag.parameter(rng.uniform(0.5, 2.0, size=(3, 3)))
    w = rng.normal(size=(3, 3))
    return lambda: _weighted_sum(ag.exp(x) + ag.sqrt(x) + x**3.0, w), [x]


@primitive("reductions")
def _(rng):
    x = _rand_param(rng, (3, 4, 2))
    w = rng.normal(size=(3, 2))
    return lambda: _weighted_sum(x.sum(axis=1), w) + x.mean() * 2.0, [x]


@primitive("reshape_transpose_slice")
def _(rng):
    x = _rand_param(rng, (4, 6))
    w = rng.normal(size=(2, 3))
    return lambda: _weighted_sum(x.reshape(2, 2, 6).transpose(1, 0, 2)[0, :, 1:4], w), [x]


@primitive("concat")
def _(rng):
    a = _rand_param(rng, (2, 3))
    b = _rand_param(rng, (4, 3))
    w = rng.normal(size=(6, 3))
    return lambda: _weighted_sum(ag.concat([a, b], axis=0), w), [a, b]


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    worst = 0.0
    for trial in range(N_TRIALS):
        rng = np.random.default_rng(1000 * hash(name) % 100000 + trial)
        f, params = PRIMITIVES[name](rng)
        worst = max(worst, grad_check(f, params))
    assert worst < 1e-4, f"{name}: max rel error {worst}"


def test_quadratic_is_machine_exact():
    # Central differences are exact on quadratics up to rounding.
    rng = np.random.default_rng(0)
    p = ag.parameter(rng.normal(size=(5,)))
    err = grad_check(lambda: (p * p).sum(), [p], eps=1e-4)
    assert err < 1e-7


def test_unused_parameter_gets_exact_zero_gradient():
    p = ag.parameter(np.ones(3))
    q = ag.parameter(np.ones(3))
    loss = (p * p).sum()
    loss.backward()
    assert q.grad is None  # never touched by the graph
    assert np.array_equal(p.grad, 2.0 * np.ones(3))


def test_gradcheck_aborts_on_nonfinite_loss():
    p = ag.parameter(np.array([1.0]))

    def f():
        with np.errstate(over="ignore"):
            return ag.exp(p * 1e6).sum()  # overflows to inf

    with pytest.raises(GradCheckError):
        grad_check(f, [p])


def test_no_grad_blocks_graph():
    p = ag.parameter(np.ones(3))
    with no_grad():
        out = (p * 2.0).sum()
    assert out._backward is None and not out.requires_grad


def test_grad_accumulates_across_uses():
    p = ag.parameter(np.array([2.0]))
    loss = (p * 3.0 + p * 4.0).sum()
    loss.backward()
    assert np.allclose(p.grad, [7.0])


def test_backward_requires_scalar():
    p = ag.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (p * 2.0).backward()


def test_gradcheck_coordinate_sampling_controls_cost():
    rng = np.random.default_rng(0)
    p = ag.parameter(rng.normal(size=(20, 20)))
    w = rng.normal(size=(20, 20))
    err = grad_check(
        lambda: (ag.gelu(p) * Tensor(w)).sum(), [p], max_coords=25, rng=np.random.default_rng(1)
    )
    assert err < 1e-4
