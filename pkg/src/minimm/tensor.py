"""Numpy-backed tensors with reverse-mode automatic differentiation.

The whole model stack (vision encoder, adapter, language model, refiner,
diffusion decoder, VAE) computes on these tensors. Design points:

- values live in a row-major numpy buffer, f32 for training and f64 for
  gradient checking;
- ops record parents plus a backward closure; ``backward()`` walks the
  graph in reverse topological order and accumulates into ``.grad``;
- a module-global grad switch (``no_grad``) skips graph construction for
  frozen submodules and sampling;
- checked mode traps NaN/Inf at the op that produced it. It is on by
  default (tests) and turned off inside training loops.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, NumericsError, ShapeError, StructureError

f32 = np.float32
f64 = np.float64

_GRAD_ENABLED = True
_CHECKED = True

# Additive mask value: large enough that exp() underflows to exactly 0.0
# in both f32 and f64, small enough to stay finite under further adds.
MASK_VALUE = -1e9


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def checked_enabled() -> bool:
    return _CHECKED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def checked_mode(enabled: bool):
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(enabled)
    try:
        yield
    finally:
        _CHECKED = prev


def _check_finite(arr: np.ndarray):
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NumericsError("non-finite value produced (checked mode is on)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
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
    """A shaped numeric array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        _check_finite(self.data)

    # -- construction -----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Tensor":
        _check_finite(data)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basics ------------------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        out_data = self.data.astype(dtype)

        def bw(g):
            return (g.astype(self.data.dtype),)

        return Tensor._from_op(out_data, (self,), bw)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar; fills ``.grad`` on reachable leaves.

        A loss with no trainable ancestry is a no-op (every grad stays None);
        the training loop relies on this when a stage's task mix contains a
        task that cannot touch the stage's trainable groups.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward is None:
            return
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p._backward is not None and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return Tensor._from_op(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        a = self

        def bw(g):
            return (-g,)

        return Tensor._from_op(-a.data, (a,), bw)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("power exponent must be a python scalar")
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._from_op(a.data**p, (a,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = a.data.reshape(shape)

        def bw(g):
            return (g.reshape(a.shape),)

        return Tensor._from_op(out, (a,), bw)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        a = self
        inv = np.argsort(axes)

        def bw(g):
            return (np.ascontiguousarray(g.transpose(inv)),)

        return Tensor._from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        out = a.data[idx]
        if np.isscalar(out) or out.ndim == 0:
            out = np.asarray(out)
        basic = isinstance(idx, (int, slice)) or (
            isinstance(idx, tuple) and all(isinstance(i, (int, slice)) for i in idx)
        )

        def bw(g):
            full = np.zeros_like(a.data)
            if basic:  # no repeated elements: direct accumulate is far cheaper
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(np.ascontiguousarray(out), (a,), bw)

    def broadcast_to(self, shape) -> "Tensor":
        a = self
        out = np.broadcast_to(a.data, shape)

        def bw(g):
            return (_unbroadcast(g, a.shape),)

        return Tensor._from_op(np.ascontiguousarray(out), (a,), bw)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gexp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gexp, a.shape).copy(),)

        return Tensor._from_op(np.asarray(out), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise ------------------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)

        def bw(g):
            return (g * out,)

        return Tensor._from_op(out, (a,), bw)

    def log(self) -> "Tensor":
        a = self

        def bw(g):
            return (g / a.data,)

        return Tensor._from_op(np.log(a.data), (a,), bw)

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)

        def bw(g):
            return (g * 0.5 / out,)

        return Tensor._from_op(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, differentiable in both."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree between shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(grads)

    return Tensor._from_op(out, tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)


def zeros(shape, dtype=f32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=f32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def backward(loss: Tensor):
    """Free-function alias used by the training code."""
    loss.backward()


class PackedSequence:
    """Variable-length items stored back to back in one [total, dim] tensor.

    Attention over a packed sequence never crosses item boundaries.
    """

    def __init__(self, data: Tensor, lengths):
        lengths = [int(n) for n in lengths]
        if any(n < 0 for n in lengths):
            raise StructureError("packed lengths must be non-negative")
        if data.ndim != 2:
            raise StructureError(f"packed data must be [total, dim], got {data.shape}")
        if sum(lengths) != data.shape[0]:
            raise StructureError(
                f"packed lengths sum to {sum(lengths)} but data holds {data.shape[0]} tokens"
            )
        self.data = data
        self.lengths = lengths

    def __len__(self):
        return len(self.lengths)

    def offsets(self):
        out = [0]
        for n in self.lengths:
            out.append(out[-1] + n)
        return out

    def item(self, i: int) -> Tensor:
        off = self.offsets()
        return self.data[off[i] : off[i + 1]]

    def items(self):
        return [self.item(i) for i in range(len(self.lengths))]
