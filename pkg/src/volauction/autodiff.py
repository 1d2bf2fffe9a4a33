"""Minimal reverse-mode autodiff over numpy arrays.

A GradientTape records every operation of one forward pass; backward() replays
the closures in reverse, accumulating exact derivatives into the leaves. This
is enough machinery for the mechanism networks: gradients reach both the layer
parameters and the bid-input tensors, which the misreport ascent needs.

Kink conventions: relu and hinge use derivative 0 at exactly 0; piecewise
linear lot values use the right derivative at lot boundaries.
"""

from __future__ import annotations

import numpy as np


class GradientTape:
    """Op recorder for a single forward pass."""

    def __init__(self):
        self._ops = []

    def var(self, value) -> "Var":
        """Create a leaf variable tracked by this tape."""
        return Var(np.asarray(value, dtype=float), self)

    def backward(self, loss: "Var") -> None:
        """Accumulate d(loss)/d(leaf) into every contributing Var's .grad."""
        if loss.value.shape != ():
            raise ValueError("backward expects a scalar loss")
        if not np.isfinite(loss.value):
            raise FloatingPointError("loss is non-finite")
        loss.grad = np.ones(())
        for op in reversed(self._ops):
            op()


class Var:
    """Array value plus accumulated gradient, attached to a tape."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: GradientTape):
        self.value = value
        self.grad = None
        self.tape = tape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape(*xs) -> GradientTape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _acc(x, g, own: bool = False):
    """Accumulate gradient g into Var x.

    own=True asserts g is a freshly allocated array (or a view of an array
    that is dead after this closure) that may be adopted without copying.
    """
    if isinstance(x, Var):
        if x.grad is None:
            x.grad = g if own else g.copy()
        else:
            x.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    tape = _tape(a, b)
    av, bv = _val(a), _val(b)
    out = Var(av + bv, tape)

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            ga = _unbroadcast(g, av.shape)
            _acc(a, ga, own=ga is not g)
        if isinstance(b, Var):
            gb = _unbroadcast(g, bv.shape)
            _acc(b, gb, own=gb is not g)

    tape._ops.append(bwd)
    return out


def sub(a, b) -> Var:
    tape = _tape(a, b)
    av, bv = _val(a), _val(b)
    out = Var(av - bv, tape)

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            ga = _unbroadcast(g, av.shape)
            _acc(a, ga, own=ga is not g)
        if isinstance(b, Var):
            _acc(b, _unbroadcast(-g, bv.shape), own=True)

    tape._ops.append(bwd)
    return out


def mul(a, b) -> Var:
    tape = _tape(a, b)
    av, bv = _val(a), _val(b)
    out = Var(av * bv, tape)

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g * bv, av.shape), own=True)
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g * av, bv.shape), own=True)

    tape._ops.append(bwd)
    return out


def matmul(a, b) -> Var:
    tape = _tape(a, b)
    av, bv = _val(a), _val(b)
    out = Var(av @ bv, tape)

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            _acc(a, g @ bv.T, own=True)
        if isinstance(b, Var):
            _acc(b, av.T @ g, own=True)

    tape._ops.append(bwd)
    return out


def relu(x: Var) -> Var:
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0.0), x.tape)

    def bwd():
        if out.grad is None:
            return
        _acc(x, out.grad * mask, own=True)

    x.tape._ops.append(bwd)
    return out


def sigmoid(x: Var) -> Var:
    v = x.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Var(s, x.tape)

    def bwd():
        if out.grad is None:
            return
        _acc(x, out.grad * s * (1.0 - s), own=True)

    x.tape._ops.append(bwd)
    return out


def softmax(x: Var) -> Var:
    """Softmax along the last axis."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Var(s, x.tape)

    def bwd():
        if out.grad is None:
            return
        inner = (out.grad * s).sum(axis=-1, keepdims=True)
        _acc(x, s * (out.grad - inner), own=True)

    x.tape._ops.append(bwd)
    return out


def vsum(x: Var, axis=None, keepdims: bool = False) -> Var:
    out = Var(np.sum(x.value, axis=axis, keepdims=keepdims), x.tape)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.value.shape).copy(), own=True)

    x.tape._ops.append(bwd)
    return out


def vmean(x: Var) -> Var:
    return mul(vsum(x), 1.0 / x.value.size)


def square(x: Var) -> Var:
    out = Var(x.value * x.value, x.tape)

    def bwd():
        if out.grad is None:
            return
        _acc(x, out.grad * 2.0 * x.value, own=True)

    x.tape._ops.append(bwd)
    return out


def hinge(x: Var) -> Var:
    """max(x, 0); derivative 0 at the kink."""
    return relu(x)


def minimum_const(x: Var, cap) -> Var:
    """Elementwise min(x, cap) for a constant cap; derivative 1 where x < cap.

    Broadcasts x against cap like numpy.minimum.
    """
    capv = np.asarray(cap, dtype=float)
    mask = x.value < capv
    out = Var(np.minimum(x.value, capv), x.tape)

    def bwd():
        if out.grad is None:
            return
        _acc(x, _unbroadcast(out.grad * mask, x.value.shape), own=True)

    x.tape._ops.append(bwd)
    return out


def rowmax(x: Var) -> Var:
    """Max along the last axis; gradient flows to the (first) argmax."""
    idx = np.argmax(x.value, axis=-1)
    out = Var(np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0], x.tape)

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(x.value)
        np.put_along_axis(g, idx[..., None], out.grad[..., None], axis=-1)
        _acc(x, g, own=True)

    x.tape._ops.append(bwd)
    return out


def gather(x: Var, idx: np.ndarray) -> Var:
    """Reorder the last axis by integer indices (same shape as x)."""
    out = Var(np.take_along_axis(x.value, idx, axis=-1), x.tape)

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(x.value)
        np.put_along_axis(g, idx, out.grad, axis=-1)
        _acc(x, g, own=True)

    x.tape._ops.append(bwd)
    return out


def reshape(x: Var, shape) -> Var:
    out = Var(x.value.reshape(shape), x.tape)

    def bwd():
        if out.grad is None:
            return
        _acc(x, out.grad.reshape(x.value.shape), own=True)

    x.tape._ops.append(bwd)
    return out


def expand_dims(x: Var, axis: int) -> Var:
    return reshape(x, np.expand_dims(x.value, axis).shape)


def lot_value(prices, quantity: Var, widths: np.ndarray) -> Var:
    """Value of `quantity` units under per-lot prices (piecewise linear).

    prices: (..., k) Var or constant; quantity: (...) Var, broadcastable
    against prices' leading axes. Right derivative at lot boundaries.
    """
    tape = _tape(prices, quantity)
    pv = _val(prices)
    qv = _val(quantity)
    starts = np.concatenate(([0.0], np.cumsum(widths)[:-1]))
    units = np.clip(qv[..., None] - starts, 0.0, widths)  # (..., k)
    out = Var((units * pv).sum(axis=-1), tape)
    bounds = np.cumsum(widths)
    idx = np.searchsorted(bounds, qv, side="right")
    inside = idx < len(widths)
    # per-unit marginal price at qv, 0 beyond the last lot
    safe_idx = np.minimum(idx, len(widths) - 1)
    marginal = np.where(
        inside,
        np.take_along_axis(np.broadcast_to(pv, units.shape), safe_idx[..., None], axis=-1)[..., 0],
        0.0,
    )

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(quantity, Var):
            _acc(quantity, _unbroadcast(g * marginal, qv.shape), own=True)
        if isinstance(prices, Var):
            _acc(prices, _unbroadcast(g[..., None] * units, pv.shape), own=True)

    tape._ops.append(bwd)
    return out


def backward(tape: GradientTape, loss: Var) -> None:
    """Run reverse accumulation for a recorded scalar loss."""
    tape.backward(loss)
