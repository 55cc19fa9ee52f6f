"""Reverse-mode differentiation over array-valued primitives.

The tape is a Wengert list: each primitive appends one entry holding its
parents, a forward rule and a vector-Jacobian product (vjp). ``backward`` walks
the list in reverse and accumulates adjoints; ``replay`` re-runs the forward
rules from the recorded leaves.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from .exceptions import ParameterError
from .grid import interpolate

Vjp = Callable[[np.ndarray, list[np.ndarray], np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass(frozen=True)
class _Entry:
    op: str
    parents: tuple[int, ...]
    forward: Callable[..., np.ndarray] | None
    vjp: Vjp | None


@dataclass(frozen=True, eq=False)
class Var:
    """Handle to one recorded value on a tape."""

    tape: Tape
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.value(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: Any) -> Var:
        return add(self, other)

    def __radd__(self, other: Any) -> Var:
        return add(other, self)

    def __sub__(self, other: Any) -> Var:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Var:
        return sub(other, self)

    def __mul__(self, other: Any) -> Var:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Var:
        return mul(other, self)

    def __neg__(self) -> Var:
        return mul(self, -1.0)

    def __matmul__(self, other: Any) -> Var:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Var:
        return take(self, key)

    def reshape(self, shape: tuple[int, ...]) -> Var:
        return reshape(self, shape)


class Tape:
    """Records a computation so it can be differentiated in reverse."""

    def __init__(self):
        self._entries: list[_Entry] = []
        self._values: list[np.ndarray] = []
        self._adjoints: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self._entries)

    def variable(self, value: Any) -> Var:
        """Record a leaf (an input or a constant)."""
        self._entries.append(_Entry("leaf", (), None, None))
        self._values.append(np.array(value, dtype=np.float64))
        return Var(self, len(self._entries) - 1)

    constant = variable

    def lift(self, value: Any) -> Var:
        if isinstance(value, Var):
            if value.tape is not self:
                msg = "Cannot mix variables from different tapes"
                raise ParameterError(msg)
            return value
        return self.constant(value)

    def value(self, var: Var) -> np.ndarray:
        return self._values[var.index]

    def record(
        self,
        op: str,
        parents: Sequence[Var],
        forward: Callable[..., np.ndarray],
        vjp: Vjp,
    ) -> Var:
        """Evaluate ``forward`` on the parents' values and append the entry."""
        indices = tuple(p.index for p in parents)
        out = np.asarray(forward(*(self._values[i] for i in indices)), dtype=np.float64)
        self._entries.append(_Entry(op, indices, forward, vjp))
        self._values.append(out)
        return Var(self, len(self._entries) - 1)

    def backward(self, output: Var, seed: np.ndarray | None = None) -> None:
        """Propagate adjoints from ``output`` back to every recorded value.

        A scalar output is seeded with 1; a non-scalar output needs an explicit
        seed (the vector in the vector-Jacobian product).
        """
        out_value = self._values[output.index]
        if seed is None:
            if out_value.size != 1:
                msg = f"Output of shape {out_value.shape} needs an explicit seed"
                raise ParameterError(msg)
            seed = np.ones_like(out_value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out_value.shape:
            msg = f"Seed shape {seed.shape} does not match output shape {out_value.shape}"
            raise ParameterError(msg)

        adjoints: list[np.ndarray | None] = [None] * len(self._entries)
        adjoints[output.index] = seed
        for index in range(output.index, -1, -1):
            adjoint = adjoints[index]
            entry = self._entries[index]
            if adjoint is None or entry.vjp is None:
                continue
            parent_values = [self._values[p] for p in entry.parents]
            grads = entry.vjp(adjoint, parent_values, self._values[index])
            for parent, grad in zip(entry.parents, grads, strict=True):
                if grad is None:
                    continue
                current = adjoints[parent]
                adjoints[parent] = grad if current is None else current + grad
        self._adjoints = adjoints

    def gradient(self, var: Var) -> np.ndarray:
        """Adjoint of ``var`` from the last ``backward`` call (zeros if unreached)."""
        if self._adjoints is None:
            msg = "backward() has not been called on this tape"
            raise ParameterError(msg)
        adjoint = self._adjoints[var.index]
        return np.zeros_like(self._values[var.index]) if adjoint is None else adjoint

    def replay(self) -> np.ndarray:
        """Recompute every non-leaf entry from the leaves; returns the last value."""
        values = list(self._values)
        for index, entry in enumerate(self._entries):
            if entry.forward is not None:
                values[index] = np.asarray(
                    entry.forward(*(values[p] for p in entry.parents)), dtype=np.float64
                )
        return values[-1]


def backprop(
    tape: Tape, output: Var, wrt: Sequence[Var], seed: np.ndarray | None = None
) -> list[np.ndarray]:
    """Run the reverse pass and return the adjoints of ``wrt``."""
    tape.backward(output, seed)
    return [tape.gradient(var) for var in wrt]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_tape(a: Any, b: Any) -> Tape:
    for item in (a, b):
        if isinstance(item, Var):
            return item.tape
    msg = "At least one operand must be a tape variable"
    raise ParameterError(msg)


def add(a: Any, b: Any) -> Var:
    tape = _binary_tape(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        "add",
        (a, b),
        np.add,
        lambda g, p, _: (_unbroadcast(g, p[0].shape), _unbroadcast(g, p[1].shape)),
    )


def sub(a: Any, b: Any) -> Var:
    tape = _binary_tape(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        "sub",
        (a, b),
        np.subtract,
        lambda g, p, _: (_unbroadcast(g, p[0].shape), _unbroadcast(-g, p[1].shape)),
    )


def mul(a: Any, b: Any) -> Var:
    tape = _binary_tape(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        "mul",
        (a, b),
        np.multiply,
        lambda g, p, _: (
            _unbroadcast(g * p[1], p[0].shape),
            _unbroadcast(g * p[0], p[1].shape),
        ),
    )


def matmul(a: Any, b: Any) -> Var:
    """Matrix product of two 2D operands."""
    tape = _binary_tape(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        "matmul", (a, b), np.matmul, lambda g, p, _: (g @ p[1].T, p[0].T @ g)
    )


def tanh(a: Var) -> Var:
    return a.tape.record("tanh", (a,), np.tanh, lambda g, _, out: (g * (1.0 - out * out),))


def square(a: Var) -> Var:
    return a.tape.record("square", (a,), np.square, lambda g, p, _: (2.0 * g * p[0],))


def total(a: Var) -> Var:
    """Sum of all elements, as a 0-d value."""
    return a.tape.record(
        "sum", (a,), np.sum, lambda g, p, _: (np.broadcast_to(g, p[0].shape).copy(),)
    )


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    return a.tape.record(
        "reshape",
        (a,),
        lambda x: np.reshape(x, shape),
        lambda g, p, _: (np.reshape(g, p[0].shape),),
    )


def take(a: Var, key: Any) -> Var:
    """Index or slice ``a``; the adjoint scatters back into the parent's shape."""

    def vjp(g: np.ndarray, p: list[np.ndarray], _: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(p[0])
        np.add.at(grad, key, g)
        return (grad,)

    return a.tape.record("take", (a,), lambda x: x[key], vjp)


def sample(array: np.ndarray, coords: Var) -> Var:
    """Multilinear interpolation of a fixed ``array`` at variable voxel coordinates."""
    source = np.asarray(array, dtype=np.float64)

    def vjp(g: np.ndarray, p: list[np.ndarray], _: np.ndarray) -> tuple[np.ndarray]:
        _, grad = interpolate(source, p[0], with_gradient=True)
        return (g[..., None] * grad,)

    return coords.tape.record(
        "sample", (coords,), lambda c: interpolate(source, c)[0], vjp
    )
