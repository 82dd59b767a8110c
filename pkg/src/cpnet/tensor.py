"""Dense N-d tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 for training, float64 for
verification) plus an optional gradient buffer of identical shape.
Operations executed while gradients are enabled record themselves on
the output tensor; ``backward()`` on a scalar walks the recorded graph
in reverse topological order, summing gradients into every consumer's
inputs, then frees the graph.

Layout is fixed N,C,H,W for image-like data; there is no broadcasting
between tensors (scalars enter via ``scalar_mul`` / ``add_scalar``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op: str | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- graph --------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar; frees the graph afterwards."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._op is None:
            raise RuntimeError("tensor is not attached to a compute graph (no recorded operations)")
        if self._backward is None:
            raise RuntimeError("graph already freed by a previous backward call; rebuild the forward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node._op is not None:
                node._backward = None
                node._parents = ()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def sum(self) -> "Tensor":
        return reduce_sum(self)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None],
              op: str) -> Tensor:
    """Wrap an op result, recording the backward rule when grads are on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * out_data / b.data)

    return make_node(out_data, (a, b), backward, "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return make_node(a.data * c, (a,), backward, "scalar_mul")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g)

    return make_node(a.data + a.data.dtype.type(c), (a,), backward, "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return make_node(np.where(mask, a.data, 0), (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    # keep outputs strictly inside (0,1) even where float precision saturates
    one = x.dtype.type(1.0)
    np.clip(s, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0.0)), out=s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s * (1.0 - s))

    return make_node(s, (a,), backward, "sigmoid")


# -- reductions & structure ---------------------------------------------------

def reduce_sum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "reduce_sum")


def sum_per_sample(a: Tensor) -> Tensor:
    """Sum over all axes except the leading batch axis: (N, ...) -> (N,)."""
    if a.data.ndim < 1:
        raise ValueError("sum_per_sample requires at least one axis")
    n = a.shape[0]
    flat_shape = (n, -1) if a.data.ndim > 1 else (n, 1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g.reshape((n,) + (1,) * (a.data.ndim - 1)), a.shape).astype(a.dtype, copy=True))

    return make_node(a.data.reshape(flat_shape).sum(axis=1), (a,), backward, "sum_per_sample")


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    first = parts[0]
    for p in parts[1:]:
        if p.data.ndim != 4 or first.data.ndim != 4:
            raise ValueError("concat_channels expects N,C,H,W tensors")
        if (p.shape[0], p.shape[2], p.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ValueError(f"concat_channels: N/H/W mismatch {first.shape} vs {p.shape}")
        if p.dtype != first.dtype:
            raise ValueError("concat_channels: dtype mismatch")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return make_node(np.concatenate([p.data for p in parts], axis=1), parts, backward, "concat_channels")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 4:
        raise ValueError("slice_channels expects an N,C,H,W tensor")
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice_channels: range [{start},{stop}) outside 0..{a.shape[1]}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accumulate(full)

    return make_node(a.data[:, start:stop].copy(), (a,), backward, "slice_channels")
