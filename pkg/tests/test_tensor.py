import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attswin.gradcheck import finite_diff_check
from attswin.optim import Adam
from attswin.tensor import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    concat_channels,
    gelu,
    layer_norm,
    linear,
    log_softmax_last,
    matmul,
    mean_tokens,
    roll,
    softmax_last,
)


def rand(rng, *shape):
    return rng.standard_normal(shape)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity_and_zero():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, b.data)
    z = matmul(Tensor(np.eye(2)), Tensor(np.zeros((2, 1))))
    np.testing.assert_array_equal(z.data, np.zeros((2, 1)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-6)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax ------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax_last(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(softmax_last(Tensor([7.0])).data, [1.0])
    x = np.array([1.0, 2.0, 3.0])
    direct = np.array([math.exp(v) for v in x]) / sum(math.exp(v) for v in x)
    np.testing.assert_allclose(softmax_last(Tensor(x)).data, direct, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    y = softmax_last(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_log_softmax_consistent_with_softmax():
    rng = np.random.default_rng(1)
    x = Tensor(rand(rng, 3, 5))
    np.testing.assert_allclose(np.exp(log_softmax_last(x).data), softmax_last(x).data, atol=1e-12)


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(Tensor([[5.0, 5, 5, 5]]), one, zero).data, np.zeros((1, 4)))
    b = np.array([1.0, -2.0, 3.0, 0.5])
    x = Tensor(np.random.default_rng(2).standard_normal((3, 4)))
    np.testing.assert_array_equal(layer_norm(x, Tensor(np.zeros(4)), Tensor(b)).data, np.tile(b, (3, 1)))


def test_layer_norm_moments():
    row = np.random.default_rng(3).standard_normal((1, 64)) * 3 + 2
    y = layer_norm(Tensor(row), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
    assert abs(y.mean()) < 1e-6
    assert abs(y.var() - 1.0) < 1e-4


# -- gelu ---------------------------------------------------------------------


def test_gelu_values():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    # normal CDF by Simpson quadrature of the density on [-12, 1]
    xs = np.linspace(-12.0, 1.0, 20001)
    pdf = np.exp(-0.5 * xs ** 2) / math.sqrt(2 * math.pi)
    h = xs[1] - xs[0]
    phi1 = h / 3 * (pdf[0] + pdf[-1] + 4 * pdf[1:-1:2].sum() + 2 * pdf[2:-1:2].sum())
    assert abs(gelu(Tensor([1.0])).data[0] - phi1) < 1e-9


# -- linear / concat / mean ---------------------------------------------------


def test_linear_examples():
    rng = np.random.default_rng(4)
    x = rand(rng, 5, 3)
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([1.0, 2.0])
    np.testing.assert_array_equal(linear(Tensor(np.zeros((4, 3))), Tensor(rand(rng, 3, 2)), Tensor(b)).data,
                                  np.tile(b, (4, 1)))
    w, bb = rand(rng, 3, 2), rand(rng, 2)
    ref = (matmul(Tensor(x), Tensor(w)) + Tensor(bb)).data
    np.testing.assert_allclose(linear(Tensor(x), Tensor(w), Tensor(bb)).data, ref, atol=1e-6)
    with pytest.raises(ShapeError):
        linear(Tensor(x), Tensor(rand(rng, 4, 2)))


def test_concat_channels():
    out = concat_channels(Tensor([[1.0]]), Tensor([[2.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])
    a = Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(concat_channels(a, Tensor(np.zeros((3, 0)))).data, a.data)
    b = Tensor(np.arange(9.0).reshape(3, 3) + 0.25)
    joined = concat_channels(a, b).data
    assert np.array_equal(joined[:, :2], a.data) and np.array_equal(joined[:, 2:], b.data)
    with pytest.raises(ShapeError):
        concat_channels(Tensor(np.ones((3, 1))), Tensor(np.ones((2, 1))))


def test_mean_tokens():
    np.testing.assert_array_equal(mean_tokens(Tensor([[1.0, 2.0]])).data, [1.0, 2.0])
    np.testing.assert_array_equal(mean_tokens(Tensor([[1.0], [3.0]])).data, [2.0])
    z = np.random.default_rng(5).standard_normal((5, 3))
    ref = [sum(z[i, c] for i in range(5)) / 5 for c in range(3)]
    np.testing.assert_allclose(mean_tokens(Tensor(z)).data, ref, atol=1e-9)
    with pytest.raises(ValueError):
        mean_tokens(Tensor(np.zeros((0, 3))))


# -- backward -----------------------------------------------------------------


def test_backward_examples():
    x = Parameter([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    x = Parameter([1.0, 2.0])
    (x * 0.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    x = Parameter([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (Parameter([1.0, 2.0]) * 2.0).backward()


def test_backward_fan_out_accumulates_and_leaves_unreachable_alone():
    x = Parameter([3.0])
    y = Parameter([5.0])
    (x * 2.0 + x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0])
    assert y.grad is None
    (x * 1.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_is_linear():
    rng = np.random.default_rng(6)
    x = Parameter(rand(rng, 4, 3))
    w = Tensor(rand(rng, 3, 2))

    def f():
        return (gelu(matmul(x, w)) ** 2).sum()

    def g():
        return softmax_last(matmul(x, w)).exp().sum()

    grads = []
    for fn in (f, g):
        x.grad = None
        fn().backward()
        grads.append(x.grad.copy())
    x.grad = None
    (f() * 2.5 + g() * -0.75).backward()
    np.testing.assert_allclose(x.grad, 2.5 * grads[0] - 0.75 * grads[1], atol=1e-6)


# -- finite differences over every differentiable op --------------------------

OPS = {
    "add": lambda p, c: (p + c).sum(),
    "mul": lambda p, c: (p * c).sum(),
    "div": lambda p, c: (c / (p * p + 1.0)).sum(),
    "pow": lambda p, c: ((p * p + 1.0) ** 1.5 * c).sum(),
    "exp_log": lambda p, c: ((p.exp() + 1.0).log() * c).sum(),
    "sqrt": lambda p, c: ((p * p + 1.0).sqrt() * c).sum(),
    "matmul": lambda p, c: matmul(p, c.swap_last()).exp().mean(),
    "transpose_reshape": lambda p, c: (p.transpose(1, 0).reshape(-1) * c.transpose(1, 0).reshape(-1)).sum(),
    "getitem_slice": lambda p, c: (p[1:, ::2] * c[1:, ::2]).sum(),
    "getitem_gather": lambda p, c: (p[np.array([0, 2, 2, 1])] * c[np.array([1, 1, 0, 2])]).sum(),
    "softmax": lambda p, c: (softmax_last(p) * c).sum(),
    "log_softmax": lambda p, c: (log_softmax_last(p) * c).sum(),
    "layer_norm": lambda p, c: (layer_norm(p, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.ones(4))) * c).sum(),
    "gelu": lambda p, c: (gelu(p) * c).sum(),
    "concat": lambda p, c: (concat([p, c * p], axis=-1) ** 2).sum(),
    "roll": lambda p, c: (roll(p, (1, -1), (0, 1)) * c).sum(),
    "mean_tokens": lambda p, c: (mean_tokens(p) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_gradient_check(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    p = Parameter(rand(rng, 3, 4), name=name)
    c = Tensor(rand(rng, 3, 4))
    report = finite_diff_check(lambda: OPS[name](p, c), p, rel_tol=1e-3)
    assert report.passed, report


def test_layer_norm_affine_parameters_gradcheck():
    rng = np.random.default_rng(7)
    x = Tensor(rand(rng, 3, 5))
    gamma, beta = Parameter(rand(rng, 5)), Parameter(rand(rng, 5))
    c = Tensor(rand(rng, 3, 5))
    for p in (gamma, beta):
        assert finite_diff_check(lambda: (layer_norm(x, gamma, beta) * c).sum(), p).passed


def test_finite_diff_check_examples():
    p = Parameter(np.random.default_rng(8).standard_normal(6))
    rep = finite_diff_check(lambda: p.sum(), p)
    assert rep.max_rel_error < 1e-9 and rep.passed
    rep = finite_diff_check(lambda: (p * p).sum(), p)
    assert rep.max_rel_error <= 1e-6


def test_finite_diff_check_reports_failure():
    p = Parameter(np.ones(3))

    def f():
        # value is sum(p) but the node claims a derivative of 7
        return Tensor._node(np.asarray(p.data.sum()), (p,), lambda g: (np.full(3, 7.0) * g,))

    rep = finite_diff_check(f, p, rel_tol=1e-3)
    assert not rep.passed


# -- adam ---------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    p = Parameter(np.arange(4.0))
    opt = Adam([p], lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(4)
        opt.step()
    np.testing.assert_array_equal(p.data, np.arange(4.0))


def test_adam_first_step_moves_by_lr():
    g = np.array([0.3, -2.0, 5e-3])
    p = Parameter(np.zeros(3))
    opt = Adam([p], lr=1e-3)
    p.grad = g.copy()
    opt.step()
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-5)
    assert p.grad is None


def test_adam_two_identical_steps():
    g = np.array([0.5, -1.5])
    p = Parameter(np.zeros(2))
    opt = Adam([p])
    for _ in range(2):
        p.grad = g.copy()
        opt.step()
    assert opt.t == 2
    m_hat, v_hat = opt.corrected_moments(0)
    np.testing.assert_allclose(m_hat, g, atol=1e-9)
    np.testing.assert_allclose(v_hat, g * g, atol=1e-9)
    np.testing.assert_allclose(opt.m[0], (1 - 0.9 ** 2) * g, atol=1e-12)


def test_adam_missing_grad_names_parameter():
    p = Parameter(np.zeros(2), name="encoder.0.w")
    with pytest.raises(RuntimeError, match="encoder.0.w"):
        Adam([p]).step()


def test_adam_deduplicates_parameters():
    p = Parameter(np.zeros(2))
    assert len(Adam([p, p]).params) == 1


def test_ops_are_deterministic():
    def run():
        rng = np.random.default_rng(9)
        x = Parameter(rand(rng, 4, 6))
        y = layer_norm(gelu(x), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        loss = softmax_last(matmul(y, y.swap_last())).sum()
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()
