"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the episode loss needs: embedding gathers, windowed
linear layers, the two similarity heads and the token cross-entropy. Values
are float64 throughout; gradients accumulate into leaf `.grad` arrays after
`backward` on a scalar.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A value or gradient tensor contains NaN or infinity."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "name", "parents", "backward_fn", "requires_grad")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=float)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad

    def __add__(self, other: "Tensor") -> "Tensor":
        out_value = self.value + other.value

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(out_value, (self, other), bwd)

    def __sub__(self, other: "Tensor") -> "Tensor":
        out_value = self.value - other.value

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(-_unbroadcast(g, other.shape))

        return Tensor(out_value, (self, other), bwd)

    def __mul__(self, other: "Tensor") -> "Tensor":
        out_value = self.value * other.value

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.value, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.value, other.shape))

        return Tensor(out_value, (self, other), bwd)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        out_value = self.value @ other.value

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g @ other.value.T)
            if other.requires_grad:
                other._accumulate(self.value.T @ g)

        return Tensor(out_value, (self, other), bwd)


def leaf(value: np.ndarray, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def const(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=float))


def scale(t: Tensor, factor: float) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g * factor)

    return Tensor(t.value * factor, (t,), bwd)


def neg(t: Tensor) -> Tensor:
    return scale(t, -1.0)


def tanh(t: Tensor) -> Tensor:
    out_value = np.tanh(t.value)

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g * (1.0 - out_value * out_value))

    return Tensor(out_value, (t,), bwd)


def relu(t: Tensor) -> Tensor:
    mask = t.value > 0

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g * mask)

    return Tensor(t.value * mask, (t,), bwd)


def absolute(t: Tensor) -> Tensor:
    sign = np.sign(t.value)

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g * sign)

    return Tensor(np.abs(t.value), (t,), bwd)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is the logistic sigmoid."""
    out_value = np.logaddexp(0.0, t.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * t.value))

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g * sig)

    return Tensor(out_value, (t,), bwd)


def gather(t: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup `t.value[index]`; backward scatter-adds into the table."""
    index = np.asarray(index)

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            acc = np.zeros_like(t.value)
            np.add.at(acc, index, g)
            t._accumulate(acc)

    return Tensor(t.value[index], (t,), bwd)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = t.shape

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g.reshape(old))

    return Tensor(t.value.reshape(shape), (t,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                part._accumulate(np.take(g, range(start, stop), axis=axis))

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bwd)


def repeat_row(t: Tensor, n: int) -> Tensor:
    """Stack a 1-D tensor into `n` identical rows."""

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g.sum(axis=0))

    return Tensor(np.tile(t.value, (n, 1)), (t,), bwd)


def tsum(t: Tensor, axis: int | None = None) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if axis is None:
            t._accumulate(np.full(t.shape, g))
        else:
            t._accumulate(np.broadcast_to(np.expand_dims(g, axis), t.shape).copy())

    return Tensor(t.value.sum(axis=axis), (t,), bwd)


def const_matmul(matrix: np.ndarray, t: Tensor) -> Tensor:
    """Left-multiply by a constant matrix (mixing weights, class masks)."""
    matrix = np.asarray(matrix, dtype=float)

    def bwd(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(matrix.T @ g)

    return Tensor(matrix @ t.value, (t,), bwd)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar `loss` into every reachable leaf."""
    if loss.value.shape != ():
        raise ValueError("backward requires a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad:
                stack.append((parent, False))
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in tensor {name!r}")
