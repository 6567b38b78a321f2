"""Tape-based reverse-mode differentiation over numpy arrays.

Deliberately tiny: only the handful of operations the training losses
need. Each op computes its value eagerly and pushes a closure onto the
tape; GradientTape.backward seeds the scalar target with gradient 1 and
replays the closures in reverse, accumulating into Var.grad. Gradients
of untouched leaves stay exactly zero. Constant arrays (anything passed
as a plain ndarray) never receive gradients.
"""

from __future__ import annotations

import numpy as np


class GradientTape:
    """Execution-ordered record of backward closures for one step."""

    def __init__(self):
        self._ops: list = []

    def leaf(self, value) -> "Var":
        return Var(value, self)

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def backward(self, target: "Var") -> None:
        """Accumulate d(target)/d(leaf) into every Var on this tape.

        target must be scalar-valued. Call once per tape; a second call
        would accumulate gradients twice.
        """
        if target.value.size != 1:
            raise ValueError(f"backward target must be scalar, got shape {target.value.shape}")
        target.grad = np.ones_like(target.value)
        for fn in reversed(self._ops):
            fn()
        # Drop the closures: they pin every intermediate array, and the
        # Var <-> tape cycle would otherwise wait for a gen-2 GC pass.
        self._ops.clear()


class Var:
    """Array value plus accumulated gradient, attached to a tape."""

    __slots__ = ("value", "grad", "tape", "__weakref__")

    def __init__(self, value, tape: GradientTape):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.tape = tape


def matmul(a: Var, b: Var) -> Var:
    out = Var(a.value @ b.value, a.tape)

    def backward():
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    a.tape.record(backward)
    return out


def matmul_const(a: Var, const: np.ndarray) -> Var:
    """a @ const where const is held fixed; no gradient flows into const."""
    const = np.asarray(const, dtype=np.float64)
    out = Var(a.value @ const, a.tape)

    def backward():
        a.grad += out.grad @ const.T

    a.tape.record(backward)
    return out


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, a.tape)

    def backward():
        a.grad += out.grad
        b.grad += out.grad

    a.tape.record(backward)
    return out


def add_bias(a: Var, bias: Var) -> Var:
    """(N, K) + (K,) with broadcasting over rows."""
    out = Var(a.value + bias.value, a.tape)

    def backward():
        a.grad += out.grad
        bias.grad += out.grad.sum(axis=0)

    a.tape.record(backward)
    return out


def tanh(a: Var) -> Var:
    out = Var(np.tanh(a.value), a.tape)

    def backward():
        a.grad += (1.0 - out.value * out.value) * out.grad

    a.tape.record(backward)
    return out


def scale(a: Var, factor: float) -> Var:
    factor = float(factor)
    out = Var(a.value * factor, a.tape)

    def backward():
        a.grad += factor * out.grad

    a.tape.record(backward)
    return out


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    out = Var(a.value.reshape(shape), a.tape)

    def backward():
        a.grad += out.grad.reshape(a.value.shape)

    a.tape.record(backward)
    return out


def masked_cross_entropy(logits: Var, labels: np.ndarray, ignore_id: int) -> Var | None:
    """Mean cross-entropy of softmax(logits) over points not labeled ignore_id.

    Returns None when every point is ignored; the caller treats that as a
    loss contributing zero with zero gradient.
    """
    labels = np.asarray(labels)
    idx = np.nonzero(labels != ignore_id)[0]
    if idx.size == 0:
        return None
    picked = labels[idx].astype(np.int64)
    z = logits.value[idx]
    hi = z.max(axis=1, keepdims=True)
    ez = np.exp(z - hi)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - hi) - np.log(sez)
    k = idx.size
    out = Var(-logp[np.arange(k), picked].mean(), logits.tape)

    def backward():
        p = ez / sez
        p[np.arange(k), picked] -= 1.0
        logits.grad[idx] += (float(out.grad) / k) * p

    logits.tape.record(backward)
    return out
