"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a contiguous float array plus an optional gradient slot.  Each
operation records its parents and a backward closure; Tensor.backward() runs
the closures in reverse topological order.  Gradient recording can be disabled
globally with the no_grad() context manager, in which case operations return
plain leaf tensors and keep no references to their inputs.

Only float32 and float64 data are supported.  Dtype is inherited from the
inputs; mixing the two in one operation is an error caught by numpy promotion
checks in the callers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True

_FLOAT_DTYPES = (np.float32, np.float64)


@contextlib.contextmanager
def no_grad():
    """Disable gradient recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient of a broadcast result back to the operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float array with an optional gradient and autodiff tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Backpropagate from a scalar tensor through the recorded tape."""
        if self.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- node construction ---------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def _coerce(x, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        data = self.data + other.data

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._result(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(g: np.ndarray) -> None:
            self._accumulate(-g)

        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        data = self.data - other.data

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._result(data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return Tensor._coerce(other, self).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        data = self.data * other.data

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        data = self.data / other.data

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * data / other.data, other.shape))

        return Tensor._result(data, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._coerce(other, self).__truediv__(self)

    def __pow__(self, exponent: float) -> "Tensor":
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** exponent

        def backward(g: np.ndarray) -> None:
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._result(data, (self,), backward)

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g * data)

        return Tensor._result(data, (self,), backward)

    def log(self) -> "Tensor":
        def backward(g: np.ndarray) -> None:
            self._accumulate(g / self.data)

        return Tensor._result(np.log(self.data), (self,), backward)

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g * 0.5 / data)

        return Tensor._result(data, (self,), backward)

    def abs(self) -> "Tensor":
        def backward(g: np.ndarray) -> None:
            self._accumulate(g * np.sign(self.data))

        return Tensor._result(np.abs(self.data), (self,), backward)

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def backward(g: np.ndarray) -> None:
            self._accumulate(g * mask)

        return Tensor._result(np.where(mask, self.data, 0.0), (self,), backward)

    def maximum(self, other) -> "Tensor":
        """Elementwise maximum; ties send half the gradient to each side."""
        other = Tensor._coerce(other, self)
        data = np.maximum(self.data, other.data)

        def backward(g: np.ndarray) -> None:
            greater = self.data > other.data
            tie = self.data == other.data
            if self.requires_grad:
                w = greater + 0.5 * tie
                self._accumulate(_unbroadcast(g * w, self.shape))
            if other.requires_grad:
                w = (~greater & ~tie) + 0.5 * tie
                other._accumulate(_unbroadcast(g * w, other.shape))

        return Tensor._result(data, (self, other), backward)

    def minimum(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        data = np.minimum(self.data, other.data)

        def backward(g: np.ndarray) -> None:
            less = self.data < other.data
            tie = self.data == other.data
            if self.requires_grad:
                w = less + 0.5 * tie
                self._accumulate(_unbroadcast(g * w, self.shape))
            if other.requires_grad:
                w = (~less & ~tie) + 0.5 * tie
                other._accumulate(_unbroadcast(g * w, other.shape))

        return Tensor._result(data, (self, other), backward)

    @staticmethod
    def where(cond: np.ndarray, a, b) -> "Tensor":
        """Select a where cond else b; cond is a constant boolean array."""
        cond = np.asarray(cond, dtype=bool)
        like = a if isinstance(a, Tensor) else b
        a = Tensor._coerce(a, like)
        b = Tensor._coerce(b, like)
        data = np.where(cond, a.data, b.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * cond, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * ~cond, b.shape))

        return Tensor._result(data, (a, b), backward)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g: np.ndarray) -> None:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis=axis)
            self._accumulate(np.broadcast_to(gg, self.shape).astype(self.data.dtype, copy=True))

        return Tensor._result(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        # Divide rather than multiply by 1/n so values match np.mean bitwise.
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def _extremum(self, axis, keepdims: bool, fn) -> "Tensor":
        data = fn(self.data, axis=axis, keepdims=keepdims)

        def backward(g: np.ndarray) -> None:
            full = fn(self.data, axis=axis, keepdims=True)
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis=axis)
            mask = self.data == full
            counts = mask.sum(axis=axis, keepdims=True)
            self._accumulate(mask * (gg / counts))

        return Tensor._result(data, (self,), backward)

    def amax(self, axis=None, keepdims: bool = False) -> "Tensor":
        """Max reduction; ties share the gradient equally."""
        return self._extremum(axis, keepdims, np.max)

    def amin(self, axis=None, keepdims: bool = False) -> "Tensor":
        return self._extremum(axis, keepdims, np.min)

    # -- shape manipulation ------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(g: np.ndarray) -> None:
            self._accumulate(g.reshape(self.shape))

        return Tensor._result(self.data.reshape(shape), (self,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)

        def backward(g: np.ndarray) -> None:
            self._accumulate(np.ascontiguousarray(g.transpose(inverse)))

        return Tensor._result(np.ascontiguousarray(self.data.transpose(axes)), (self,), backward)

    def __getitem__(self, idx) -> "Tensor":
        data = self.data[idx]
        if np.isscalar(data) or data.ndim == 0:
            data = np.asarray(data)

        def backward(g: np.ndarray) -> None:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            np.add.at(self.grad, idx, g)

        return Tensor._result(np.ascontiguousarray(data), (self,), backward)

    def matmul(self, other: "Tensor") -> "Tensor":
        """2-D matrix product; higher ranks are intentionally unsupported."""
        other = Tensor._coerce(other, self)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        data = self.data @ other.data

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._result(data, (self, other), backward)

    __matmul__ = matmul


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> None:
        parts = np.split(g, len(tensors), axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(np.squeeze(part, axis=axis))

    return Tensor._result(data, tensors, backward)


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray) -> None:
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                t._accumulate(g[tuple(sl)])

    return Tensor._result(data, tensors, backward)
