"""Tensor and tape mechanics: exact values, oracles, gradient checks."""

import math

import numpy as np
import pytest

from bmru import autodiff as ad
from bmru.autodiff import (
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    constant,
    grad_check,
    leaf,
)


def test_matmul_identity():
    out = ad.matmul(constant([[1.0, 0.0], [0.0, 1.0]]), constant([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_matmul_scalar_case():
    out = ad.matmul(constant([[2.0]]), constant([[5.0]]))
    assert out.data.tolist() == [[10.0]]


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    out = ad.matmul(constant(a), constant(b))
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


def test_matmul_backward_adjoints():
    rng = np.random.default_rng(1)
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((4, 2)))
    with GradTape() as tape:
        y = ad.tsum(ad.matmul(a, b))
        tape.backward(y)
    # d(sum(AB))/dA = ones @ B^T, and symmetrically for B
    assert np.allclose(tape.grad(a), np.ones((3, 2)) @ b.data.T, atol=1e-14)
    assert np.allclose(tape.grad(b), a.data.T @ np.ones((3, 2)), atol=1e-14)


def test_heaviside_forward_values():
    x = constant(np.array([0.5, -0.3, 0.0]))
    out = ad.heaviside(x)
    assert out.data.tolist() == [1.0, 0.0, 0.0]


def test_heaviside_surrogate_factor():
    x = leaf(np.array([0.5]))
    with GradTape() as tape:
        y = ad.tsum(ad.heaviside(x))
        tape.backward(y)
    factor = tape.grad(x)[0]
    assert abs(factor - 1.0 / (1.0 + (math.pi * 0.5) ** 2)) < 1e-15
    assert abs(factor - 0.2884) < 5e-5


def test_heaviside_surrogate_at_zero():
    x = leaf(np.array([0.0]))
    with GradTape() as tape:
        tape.backward(ad.tsum(ad.heaviside(x)))
    assert tape.grad(x)[0] == 1.0


def test_surrogate_matches_formula_pointwise():
    xs = np.linspace(-4.0, 4.0, 101)
    x = leaf(xs)
    with GradTape() as tape:
        tape.backward(ad.tsum(ad.heaviside(x)))
    expected = 1.0 / (1.0 + (math.pi * xs) ** 2)
    assert np.max(np.abs(tape.grad(x) - expected)) < 1e-12


def test_custom_backward_uses_input_not_output():
    # A backward that inspected the forward output {0,1} would return the
    # surrogate at 0 or 1; at x=0.5 those differ from the correct factor.
    x = leaf(np.array([0.5]))
    with GradTape() as tape:
        tape.backward(ad.tsum(ad.heaviside(x)))
    got = tape.grad(x)[0]
    at_input = ad.heaviside_surrogate_np(np.array([0.5]))[0]
    at_output = ad.heaviside_surrogate_np(np.array([1.0]))[0]
    assert got == at_input
    assert got != at_output


def test_smooth_heaviside_derivative_is_exactly_the_surrogate():
    err = grad_check(lambda t: ad.tsum(ad.smooth_heaviside(t)), constant(np.array([0.3, -1.2, 0.0, 2.0])))
    assert err < 1e-8


def test_grad_check_quadratic():
    x = constant(np.array([1.0, 2.0, 3.0]))
    err = grad_check(lambda t: ad.tsum(ad.mul(t, t)), x, eps=1e-5)
    assert err < 1e-6


def test_grad_check_linear_sum():
    x = constant(np.array([0.4, -2.0, 7.5]))
    err = grad_check(lambda t: ad.tsum(t), x, eps=1e-5)
    assert err < 1e-10


def test_grad_check_two_layer_mlp_cross_entropy():
    rng = np.random.default_rng(7)
    w1 = constant(rng.standard_normal((5, 8)) * 0.3)
    b1 = constant(rng.standard_normal(8) * 0.1)
    w2 = constant(rng.standard_normal((8, 3)) * 0.3)
    b2 = constant(rng.standard_normal(3) * 0.1)
    labels = np.array([1, 0])

    def f(x):
        h = ad.tanh(ad.add(ad.matmul(x, w1), b1))
        logits = ad.add(ad.matmul(h, w2), b2)
        return ad.cross_entropy_rows(logits, labels)

    err = grad_check(f, constant(rng.standard_normal((2, 5))), eps=1e-5)
    assert err < 1e-4


SMOOTH_OPS = [
    ("sigmoid", ad.sigmoid, (-3.0, 3.0)),
    ("tanh", ad.tanh, (-2.0, 2.0)),
    ("exp", ad.exp, (-1.0, 1.0)),
    ("log", ad.log, (0.5, 3.0)),
    ("sqrt", ad.sqrt, (0.5, 3.0)),
    ("sin", ad.sin, (-2.0, 2.0)),
    ("cos", ad.cos, (-2.0, 2.0)),
    ("softplus", ad.softplus, (-3.0, 3.0)),
    ("mul_self", lambda t: ad.mul(t, t), (-2.0, 2.0)),
    ("mean", ad.tmean, (-2.0, 2.0)),
]


@pytest.mark.parametrize("name,op,rng_range", SMOOTH_OPS, ids=[o[0] for o in SMOOTH_OPS])
def test_central_difference_all_smooth_ops(name, op, rng_range):
    rng = np.random.default_rng(hash(name) % 2**32)
    lo, hi = rng_range
    x = constant(rng.uniform(lo, hi, size=6))
    err = grad_check(lambda t: ad.tsum(op(t)), x, eps=1e-5)
    assert err < 1e-4, f"{name}: {err}"


def test_central_difference_layer_norm_and_slices():
    rng = np.random.default_rng(11)
    gamma = constant(rng.uniform(0.5, 1.5, size=6))
    beta = constant(rng.standard_normal(6))

    def f(t):
        ln = ad.layer_norm(t, gamma, beta)
        left = ad.slice_cols(ln, 0, 3)
        right = ad.slice_cols(ln, 3, 6)
        return ad.tsum(ad.mul(left, right))

    err = grad_check(f, constant(rng.standard_normal((4, 6))), eps=1e-5)
    assert err < 1e-4


def test_central_difference_matmul_path():
    rng = np.random.default_rng(13)
    w = constant(rng.standard_normal((5, 4)))

    def f(t):
        return ad.tsum(ad.relu(ad.matmul(t, w)))

    err = grad_check(f, constant(rng.uniform(0.3, 1.0, size=(2, 5))), eps=1e-5)
    assert err < 1e-4


def test_backward_accumulates_additively_and_zeroes_exactly():
    x = leaf(np.array([1.0, -2.0]))
    with GradTape() as tape:
        y = ad.tsum(ad.mul(x, x))
        tape.backward(y)
        once = tape.grad(x).copy()
        tape.backward(y)
        twice = tape.grad(x).copy()
    assert np.array_equal(twice, 2.0 * once)
    tape.zero_grad()
    assert np.array_equal(tape.grad(x), np.zeros(2))


def test_unused_leaf_gradient_is_zero():
    used = leaf(np.array([2.0]))
    unused = leaf(np.array([5.0]))
    with GradTape() as tape:
        tape.watch(unused)
        tape.backward(ad.tsum(ad.mul(used, used)))
    assert np.array_equal(tape.grad(unused), np.zeros(1))


def test_shared_intermediate_accumulates():
    x = leaf(np.array([3.0]))
    with GradTape() as tape:
        h = ad.mul(x, x)          # used twice downstream
        y = ad.tsum(ad.add(h, h))
        tape.backward(y)
    assert tape.grad(x)[0] == pytest.approx(2 * 2 * 3.0)


def test_bias_row_broadcast_allowed():
    m = constant(np.ones((3, 2)))
    b = leaf(np.array([1.0, 2.0]))
    with GradTape() as tape:
        tape.backward(ad.tsum(ad.add(m, b)))
    assert np.array_equal(tape.grad(b), np.array([3.0, 3.0]))


def test_disallowed_broadcasts_raise():
    with pytest.raises(ShapeError):
        ad.add(constant(np.ones((3, 2))), constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(constant(np.ones((3, 2))), constant(np.ones(3)))
    with pytest.raises(ShapeError):
        ad.mul(constant(np.ones(4)), constant(np.ones(3)))


def test_rank_limit():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 2, 2)))


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        ad.log(constant(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        ad.exp(constant(np.array([1e6])))


def test_dropout_inverted_scaling_and_identity():
    rng = np.random.default_rng(3)
    x = constant(np.ones((200, 50)))
    out = ad.dropout(x, 0.5, rng)
    values = set(np.unique(out.data).tolist())
    assert values <= {0.0, 2.0}
    assert abs(out.data.mean() - 1.0) < 0.05
    same = ad.dropout(x, 0.0, rng)
    assert np.array_equal(same.data, x.data)


def test_cross_entropy_uniform_logits():
    out = ad.cross_entropy_rows(constant(np.zeros((5, 2))), np.zeros(5, dtype=int))
    assert abs(out.item() - math.log(2.0)) < 1e-12


def test_stack_and_slice_roundtrip():
    rng = np.random.default_rng(5)
    a = constant(rng.standard_normal((2, 3)))
    b = constant(rng.standard_normal((4, 3)))
    s = ad.stack_rows([a, b])
    assert np.array_equal(ad.slice_rows(s, 0, 2).data, a.data)
    assert np.array_equal(ad.slice_rows(s, 2, 6).data, b.data)


def test_tape_confined_recording():
    # ops outside a tape context record nothing and still compute
    x = leaf(np.array([2.0]))
    y = ad.mul(x, x)
    assert y.data[0] == 4.0
    with GradTape() as tape:
        tape.watch(x)
        tape.backward(ad.tsum(ad.mul(x, x)))
        inside = tape.grad(x).copy()
    assert inside[0] == 4.0
