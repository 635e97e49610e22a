"""A small reverse-mode autodiff tensor over float32 numpy arrays.

Each op builds an output ``Tensor`` holding references to its parents and a
closure that pushes the output gradient back to them. ``Tensor.backward``
walks the graph in reverse topological order, so a tensor used several times
(a generator applied twice in a cycle, an encoder shared by three heads)
accumulates gradient from every use.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError

DTYPE = np.float32


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE)
    return arr


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{bad} non-finite value(s) produced by {what}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None, op: str = "leaf"):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- construction -----------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        data = check_finite(_as_array(data), op)
        needs = any(p.requires_grad for p in parents)
        return cls(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                   _backward=backward if needs else None, op=op)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    # -- gradient plumbing ------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g, dtype=DTYPE), self.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones(self.shape, dtype=DTYPE)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        # interior gradients are scratch; parameters (leaves) keep accumulating
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                check_finite(node.grad, f"backward of {node.op}")
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(g)
            b._accumulate(g)
        return Tensor.from_op(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)
        return Tensor.from_op(-a.data, (a,), backward, "neg")

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)
        return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return self * (1.0 / float(scalar))

    def sum(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(np.broadcast_to(g, a.shape))
        return Tensor.from_op(a.data.sum(dtype=np.float64), (a,), backward, "sum")

    def mean(self) -> "Tensor":
        a = self
        n = a.size

        def backward(g):
            a._accumulate(np.broadcast_to(g / n, a.shape))
        return Tensor.from_op(a.data.mean(dtype=np.float64), (a,), backward, "mean")

    def reshape(self, *shape) -> "Tensor":
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(g):
            a._accumulate(g.reshape(a.shape))
        return Tensor.from_op(a.data.reshape(shape), (a,), backward, "reshape")

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros(a.shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            a._accumulate(full)
        return Tensor.from_op(a.data[idx], (a,), backward, "index")


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)
