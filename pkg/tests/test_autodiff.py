import math
import weakref

import numpy as np
import pytest
from numpy.testing import assert_allclose

from geoseg.autodiff import (
    GradientTape,
    Var,
    add,
    add_bias,
    masked_cross_entropy,
    matmul,
    matmul_const,
    reshape,
    scale,
    tanh,
)

IGNORE = 0xFFFF


def finite_difference(f, arr: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every entry of arr."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def contract(v: Var, weights: np.ndarray) -> Var:
    """Scalar-valued probe: flatten and project onto fixed weights."""
    flat = reshape(v, (v.value.size,))
    return matmul_const(flat, weights.reshape(-1, 1))


def test_var_starts_with_zero_grad():
    tape = GradientTape()
    v = tape.leaf(np.ones((2, 3)))
    assert v.value.dtype == np.float64
    assert np.array_equal(v.grad, np.zeros((2, 3)))


def test_backward_requires_scalar_target():
    tape = GradientTape()
    v = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(v)


def test_untouched_leaf_keeps_exact_zero_grad(rng):
    tape = GradientTape()
    x = tape.leaf(rng.normal(size=(3, 2)))
    unused = tape.leaf(rng.normal(size=(4, 4)))
    loss = contract(tanh(x), rng.normal(size=6))
    tape.backward(loss)
    assert np.array_equal(unused.grad, np.zeros((4, 4)))


def test_backward_releases_the_graph():
    # Intermediate Vars must die by refcount alone once backward ran;
    # a lingering closure would pin every activation of the step.
    tape = GradientTape()
    x = tape.leaf(np.ones((4, 4)))
    out = contract(tanh(x), np.ones(16))
    ref = weakref.ref(out)
    tape.backward(out)
    del out
    assert ref() is None


def test_shared_leaf_accumulates():
    tape = GradientTape()
    x = tape.leaf(np.array([[2.0]]))
    y = add(x, x)
    tape.backward(contract(y, np.array([1.0])))
    assert x.grad[0, 0] == 2.0


def test_matmul_value_and_gradient(rng):
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    probe = rng.normal(size=6)

    def run():
        tape = GradientTape()
        a, b = tape.leaf(a0), tape.leaf(b0)
        out = contract(matmul(a, b), probe)
        return tape, a, b, out

    tape, a, b, out = run()
    assert_allclose(out.value, (a0 @ b0).ravel() @ probe, atol=1e-12)
    tape.backward(out)
    fd_a = finite_difference(lambda: run()[3].value.item(), a0)
    fd_b = finite_difference(lambda: run()[3].value.item(), b0)
    assert_allclose(a.grad, fd_a, atol=1e-7)
    assert_allclose(b.grad, fd_b, atol=1e-7)


def test_matmul_const_blocks_gradient_into_constant(rng):
    x0 = rng.normal(size=(2, 3))
    const = rng.normal(size=(3, 3))
    probe = rng.normal(size=6)
    tape = GradientTape()
    x = tape.leaf(x0)
    out = contract(matmul_const(x, const), probe)
    tape.backward(out)
    fd = finite_difference(lambda: float((x0 @ const).ravel() @ probe), x0)
    assert_allclose(x.grad, fd, atol=1e-7)


def test_add_bias_sums_over_rows(rng):
    x0 = rng.normal(size=(5, 3))
    b0 = rng.normal(size=3)
    probe = rng.normal(size=15)

    def value():
        return float((x0 + b0).ravel() @ probe)

    tape = GradientTape()
    x, b = tape.leaf(x0), tape.leaf(b0)
    tape.backward(contract(add_bias(x, b), probe))
    assert_allclose(b.grad, finite_difference(value, b0), atol=1e-7)
    assert_allclose(x.grad, finite_difference(value, x0), atol=1e-7)


def test_tanh_scale_reshape_chain(rng):
    x0 = rng.normal(size=(2, 4))
    probe = rng.normal(size=8)

    def value():
        return float((2.5 * np.tanh(x0)).reshape(8) @ probe)

    tape = GradientTape()
    x = tape.leaf(x0)
    out = contract(reshape(scale(tanh(x), 2.5), (8,)), probe)
    assert_allclose(out.value.item(), value(), atol=1e-12)
    tape.backward(out)
    assert_allclose(x.grad, finite_difference(value, x0), atol=1e-7)


# ------------------------------------------------------- masked cross-entropy


def ce_oracle(logits: np.ndarray, labels: np.ndarray) -> float:
    """Scalar-arithmetic reference: mean -log softmax over valid points."""
    total = 0.0
    count = 0
    for row, y in zip(logits, labels):
        if y == IGNORE:
            continue
        denom = sum(math.exp(v - max(row)) for v in row)
        total += -(row[y] - max(row) - math.log(denom))
        count += 1
    return total / count


def test_saturated_softmax_has_negligible_loss():
    logits = np.zeros((3, 5))
    labels = np.array([1, 2, 0], dtype=np.uint16)
    logits[np.arange(3), labels] = 50.0
    tape = GradientTape()
    out = masked_cross_entropy(tape.leaf(logits), labels, IGNORE)
    assert float(out.value) < 1e-8


def test_uniform_softmax_loss_is_log_c():
    tape = GradientTape()
    out = masked_cross_entropy(
        tape.leaf(np.zeros((4, 19))), np.zeros(4, dtype=np.uint16), IGNORE
    )
    assert_allclose(float(out.value), math.log(19.0), atol=1e-12)


def test_all_ignored_returns_none():
    tape = GradientTape()
    labels = np.full(3, IGNORE, dtype=np.uint16)
    assert masked_cross_entropy(tape.leaf(np.ones((3, 2))), labels, IGNORE) is None


def test_matches_scalar_oracle_and_ignores_masked(rng):
    logits0 = rng.normal(size=(6, 3))
    labels = np.array([0, 2, IGNORE, 1, IGNORE, 2], dtype=np.uint16)
    tape = GradientTape()
    logits = tape.leaf(logits0)
    out = masked_cross_entropy(logits, labels, IGNORE)
    assert_allclose(float(out.value), ce_oracle(logits0, labels), atol=1e-10)
    tape.backward(out)
    fd = finite_difference(lambda: ce_oracle(logits0, labels), logits0)
    assert_allclose(logits.grad, fd, atol=1e-7)
    # Ignored rows receive exactly zero gradient.
    assert np.array_equal(logits.grad[2], np.zeros(3))
    assert np.array_equal(logits.grad[4], np.zeros(3))


def test_gradient_scales_with_upstream_factor(rng):
    logits0 = rng.normal(size=(4, 3))
    labels = np.array([0, 1, 2, 0], dtype=np.uint16)

    def grads(factor):
        tape = GradientTape()
        logits = tape.leaf(logits0)
        out = masked_cross_entropy(logits, labels, IGNORE)
        tape.backward(scale(out, factor))
        return logits.grad

    assert_allclose(grads(3.0), 3.0 * grads(1.0), atol=1e-12)
