"""Dense tensors with reverse-mode automatic differentiation.

numpy owns the buffers and the BLAS calls; the graph bookkeeping, backward
rules and the finite-difference checker live here. float32 is the training
precision, float64 the gradient-checking precision. Broadcasting follows
trailing-dimension alignment only.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextmanager
def no_grad():
    """Disable graph construction inside the block (teacher forwards, eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense n-d array that can record the operations applied to it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        topo = _toposort(self)
        self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # method forms used throughout the model code
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS; training graphs chain deeper than the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    for da, db in zip(reversed(a_shape), reversed(b_shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), backward)


_UNARY = {"neg": neg, "abs": absolute, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name; op_kind in {add, sub, mul, div, neg, abs, square}."""
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary, second operand given")
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} is binary, second operand missing")
        return _BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- matmul ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        if not (a.ndim == 2 and b.ndim == 2):
            raise ShapeError(f"matmul leading (batch) dims must match: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


# -- shape plumbing -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check_broadcast(a.shape, shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                p._accumulate(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] = g
            a._accumulate(ga)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward)


# -- reductions and normalizers -------------------------------------------

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(ax if ax >= 0 else ax + ndim for ax in axis)
    for ax in axis:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for {ndim}-d tensor")
    return axis


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, a.ndim)[0]
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        if a.requires_grad:
            a._accumulate((g - (g * y).sum(axis=ax, keepdims=True)) * y)

    return _make(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, a.ndim)[0]
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    y = shifted - lse

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(y) * g.sum(axis=ax, keepdims=True))

    return _make(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the trailing extent to zero mean / unit variance, then scale+shift."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm scale/shift must have shape ({a.shape[-1]},), got {gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, a.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, a.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(term * inv)

    return _make(xhat * gain.data + bias.data, (a, gain, bias), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)

    def backward(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(0.5 * x * (1.0 + t), (a,), backward)


# -- gather / scatter -----------------------------------------------------

def _check_indices(idx: np.ndarray, length: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError(f"index out of range for extent {length}: {int(idx.min())}..{int(idx.max())}")
    last = idx.shape[-1]
    flat = idx.reshape(-1, last)
    for row in flat:
        if len(np.unique(row)) != last:
            raise IndexError("duplicate indices in gather/scatter")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by unique indices; (L, C) -> (K, C), or batched (B, L, C) with (B, K)."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim == 2 and idx.ndim == 1:
        _check_indices(idx, a.shape[0])

        def backward(g):
            if a.requires_grad:
                ga = np.zeros_like(a.data)
                ga[idx] = g
                a._accumulate(ga)

        return _make(np.ascontiguousarray(a.data[idx]), (a,), backward)
    if a.ndim == 3 and idx.ndim == 2 and idx.shape[0] == a.shape[0]:
        _check_indices(idx, a.shape[1])
        bsel = np.arange(a.shape[0])[:, None]

        def backward(g):
            if a.requires_grad:
                ga = np.zeros_like(a.data)
                ga[bsel, idx] = g
                a._accumulate(ga)

        return _make(np.ascontiguousarray(a.data[bsel, idx]), (a,), backward)
    raise ShapeError(f"gather_rows: tensor {a.shape} with indices {idx.shape} unsupported")


def scatter_rows(src: Tensor, indices, length: int) -> Tensor:
    """Inverse of gather_rows: place rows at the given unique indices in a zero tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    if src.ndim == 2 and idx.ndim == 1:
        _check_indices(idx, length)
        out = np.zeros((length, src.shape[1]), dtype=src.data.dtype)
        out[idx] = src.data

        def backward(g):
            if src.requires_grad:
                src._accumulate(g[idx])

        return _make(out, (src,), backward)
    if src.ndim == 3 and idx.ndim == 2 and idx.shape[0] == src.shape[0]:
        _check_indices(idx, length)
        bsel = np.arange(src.shape[0])[:, None]
        out = np.zeros((src.shape[0], length, src.shape[2]), dtype=src.data.dtype)
        out[bsel, idx] = src.data

        def backward(g):
            if src.requires_grad:
                src._accumulate(g[bsel, idx])

        return _make(out, (src,), backward)
    raise ShapeError(f"scatter_rows: tensor {src.shape} with indices {idx.shape} unsupported")


def embedding_rows(table: Tensor, indices) -> Tensor:
    """Row lookup allowing repeated indices (positional tables shared across a batch)."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_rows needs a 2-d table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"index out of range for table with {table.shape[0]} rows")

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(gt)

    return _make(np.ascontiguousarray(table.data[idx]), (table,), backward)


# -- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    checked: int
    worst_index: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tolerance:.1e}, {self.checked} coordinates, worst at {self.worst_index})"
        )


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tolerance: float = 1e-6,
    h: float = 1e-5,
    sample: Iterable[int] | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar f at x against central differences.

    The error is |analytic - numeric| / max(1, |analytic|, |numeric|) per
    coordinate; `sample` restricts the finite-difference probe to a subset of
    flat coordinates (full sweep by default).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1).copy()
    coords = list(sample) if sample is not None else list(range(flat.size))
    numeric = np.zeros(len(coords), dtype=np.float64)
    with no_grad():
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(flat.reshape(x.shape).copy())).item()
            flat[i] = orig - h
            lo = f(Tensor(flat.reshape(x.shape).copy())).item()
            flat[i] = orig
            numeric[j] = (hi - lo) / (2.0 * h)

    a = analytic.reshape(-1)[coords].astype(np.float64)
    errs = _rel_err(a, numeric)
    worst = int(np.argmax(errs)) if errs.size else 0
    max_err = float(errs[worst]) if errs.size else 0.0
    worst_index = np.unravel_index(coords[worst], x.shape) if errs.size else ()
    return GradCheckReport(max_err, tolerance, len(coords), tuple(int(k) for k in worst_index))
