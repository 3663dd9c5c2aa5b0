"""Dense tensors with reverse-mode automatic differentiation.

The engine is intentionally small: numpy arrays for storage (row-major,
float32 for training or float64 for numerical verification), an op-level
graph built from parent links, and a single topological backward pass.
Broadcasting is restricted to the cases the mixer model actually uses:
equal shapes, python scalars, and extent-1 axes after left-padding ranks.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

Scalar = (int, float, np.integer, np.floating)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Result shape for the restricted broadcast rule, or ShapeError."""
    if sa == sb:
        return sa
    rank = max(len(sa), len(sb))
    pa = (1,) * (rank - len(sa)) + sa
    pb = (1,) * (rank - len(sb)) + sb
    out = []
    for da, db in zip(pa, pb):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an upstream gradient back down to an operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``Tensor(shape, values)`` builds a tensor from a flat row-major value
    sequence; ``Tensor.from_array`` wraps an existing array-like. Gradients
    accumulate across ``backward`` calls until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, shape, values, requires_grad: bool = False, dtype=None):
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise ShapeError(f"all extents must be >= 1, got {shape}")
        flat = np.asarray(values, dtype=dtype if dtype is not None else np.float32)
        if flat.ndim != 1:
            flat = flat.reshape(-1)
        if flat.size != math.prod(shape):
            raise ShapeError(
                f"shape {shape} needs {math.prod(shape)} values, got {flat.size}"
            )
        self.data = flat.reshape(shape)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    @classmethod
    def from_array(cls, array, requires_grad: bool = False, dtype=None) -> "Tensor":
        arr = np.asarray(array)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = bool(requires_grad)
        t._parents = ()
        t._grad_fn = None
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, dtype=np.float32) -> "Tensor":
        return cls.from_array(np.zeros(shape, dtype=dtype), requires_grad)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, grad_fn) -> "Tensor":
        """Wrap an op result; graph edges are kept only when grads can flow."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = parents
            t._grad_fn = grad_fn
        else:
            t._parents = ()
            t._grad_fn = None
        return t

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision; does not carry graph history."""
        return Tensor.from_array(self.data.astype(dtype), self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- gradients ------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every requires_grad ancestor of a scalar loss.

        Repeated calls accumulate additively; each call traverses every
        reachable graph node exactly once, in reverse topological order.
        """
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = self._toposort()
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if not parent.requires_grad:
                    continue
                acc = upstream.get(id(parent))
                upstream[id(parent)] = pg if acc is None else acc + pg

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor.from_array(np.asarray(value, dtype=ref.dtype))


def _binary(a: Tensor, b, forward, grad_a, grad_b) -> Tensor:
    """Elementwise binary op with scalar or (restricted) broadcast operand."""
    if isinstance(b, Scalar):
        out = forward(a.data, b)
        return Tensor._from_op(out, (a,), lambda g: (grad_a(g, a.data, b),))
    if not isinstance(b, Tensor):
        raise TypeError(f"expected Tensor or scalar operand, got {type(b).__name__}")
    _broadcast_shape(a.shape, b.shape)
    out = forward(a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(grad_a(g, a.data, b.data), a.shape),
            _unbroadcast(grad_b(g, a.data, b.data), b.shape),
        )

    return Tensor._from_op(out, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        forward=lambda x, y: x + y,
        grad_a=lambda g, x, y: g,
        grad_b=lambda g, x, y: g,
    )


def sub(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        forward=lambda x, y: x - y,
        grad_a=lambda g, x, y: g,
        grad_b=lambda g, x, y: -g,
    )


def mul(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        forward=lambda x, y: x * y,
        grad_a=lambda g, x, y: g * y,
        grad_b=lambda g, x, y: g * x,
    )


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (the scalar is not a graph node)."""
    if not isinstance(s, Scalar):
        raise TypeError(f"scale() needs a scalar, got {type(s).__name__}")
    return mul(a, float(s))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d needs a rank-2 tensor, got shape {a.shape}")
    return Tensor._from_op(
        np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),)
    )


def swap_last_axes(a: Tensor) -> Tensor:
    """Swap the trailing two axes; rank-2 case coincides with transpose2d."""
    if a.ndim < 2:
        raise ShapeError(f"swap_last_axes needs rank >= 2, got shape {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return Tensor._from_op(
        out, (a,), lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} values) to {shape}")
    return Tensor._from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean; the reduced axis is dropped (axis=None -> scalar)."""
    if axis is None:
        out = a.data.mean()
        n = a.size
        return Tensor._from_op(
            np.asarray(out, dtype=a.dtype), (a,),
            lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False),),
        )
    ax = _check_axis(a, axis)
    out = a.data.mean(axis=ax)
    n = a.shape[ax]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), a.shape).copy(),)

    return Tensor._from_op(out, (a,), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return Tensor._from_op(
            np.asarray(a.data.sum(), dtype=a.dtype), (a,),
            lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),),
        )
    ax = _check_axis(a, axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=ax), (a,), backward)
