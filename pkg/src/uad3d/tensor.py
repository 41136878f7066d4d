"""Dense tensors with reverse-mode automatic differentiation.

Every operation records a node holding its parents and a closure that maps the
output gradient to one gradient per parent. The closure captures exactly the
arrays its rule needs. :func:`backward` walks the graph once in reverse
topological order and then drops the closures so saved activations are freed.

All reductions run in a fixed order on a single thread, so repeated
forward/backward passes on identical inputs are bit-identical.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the domain of a function (e.g. log of a non-positive value)."""


class UsageError(RuntimeError):
    """The autodiff API was called in an unsupported way."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return _make(ad / bd, (a, b), fn, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    xd = x.data
    pos = xd > 0
    slope = np.where(pos, 1.0, alpha).astype(xd.dtype, copy=False)
    return _make(xd * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return _make(np.where(pos, xd, 0).astype(xd.dtype, copy=False), (x,), lambda g: (g * pos,), "relu")


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size
    return _make(
        np.asarray(x.data.sum() / n, dtype=dtype), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean"
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- dense


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (B, F) and weight (G, F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, fn, "dense")


# ---------------------------------------------------------------- convolution


def _offsets(ks: Sequence[int]):
    return itertools.product(*(range(k) for k in ks))


def _window(off: Sequence[int], out_sp: Sequence[int], stride: int) -> tuple:
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp)
    )


def im2col(xp: np.ndarray, ks: Sequence[int], stride: int, out_sp: Sequence[int]) -> np.ndarray:
    """Gather sliding windows of a padded (B, C, *S) array into (B, C*prod(ks), prod(out_sp))."""
    B, C = xp.shape[:2]
    cols = np.empty((B, C) + tuple(ks) + tuple(out_sp), dtype=xp.dtype)
    for off in _offsets(ks):
        cols[(slice(None), slice(None)) + off] = xp[_window(off, out_sp, stride)]
    return cols.reshape(B, C * int(np.prod(ks)), -1)


def col2im(cols: np.ndarray, padded_sp: Sequence[int], ks: Sequence[int], stride: int,
           out_sp: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add windows back into a padded array."""
    B = cols.shape[0]
    C = cols.shape[1] // int(np.prod(ks))
    cols = cols.reshape((B, C) + tuple(ks) + tuple(out_sp))
    xp = np.zeros((B, C) + tuple(padded_sp), dtype=cols.dtype)
    for off in _offsets(ks):
        xp[_window(off, out_sp, stride)] += cols[(slice(None), slice(None)) + off]
    return xp


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_i a[i] @ b[i].T for a: (B, M, P), b: (B, N, P); batch order fixed."""
    out = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        out += a[i] @ b[i].T
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p)] * (x.ndim - 2))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[(slice(None), slice(None)) + (slice(p, -p),) * (x.ndim - 2)]


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def _check_conv_args(x: Tensor, w: Tensor, stride: int, padding: int, name: str) -> None:
    if stride < 1 or padding < 0:
        raise DimensionError(f"{name}: stride must be >= 1 and padding >= 0")
    if x.ndim not in (4, 5) or w.ndim != x.ndim:
        raise DimensionError(f"{name}: expected (B, C, [D,] H, W) input and matching kernel, got {x.shape}, {w.shape}")


def conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """N-d cross-correlation. x: (B, C, *S), weight: (K, C, *k), bias: (K,)."""
    _check_conv_args(x, weight, stride, padding, "conv")
    B, C = x.shape[:2]
    K, Cw = weight.shape[:2]
    if C != Cw:
        raise DimensionError(f"conv: input has {C} channels, kernel expects {Cw}")
    ks = weight.shape[2:]
    in_sp = x.shape[2:]
    if any(n + 2 * padding < k for n, k in zip(in_sp, ks)):
        raise DimensionError(f"conv: padded input {in_sp} smaller than kernel {ks}")
    if bias is not None and bias.shape != (K,):
        raise DimensionError(f"conv: bias {bias.shape} does not match {K} output channels")
    out_sp = tuple(conv_output_extent(n, k, stride, padding) for n, k in zip(in_sp, ks))
    xd, w2 = x.data, weight.data.reshape(K, -1)
    cols = im2col(_pad(xd, padding), ks, stride, out_sp)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((B, K) + out_sp)
    padded_sp = tuple(n + 2 * padding for n in in_sp)

    def fn(g):
        g2 = g.reshape(B, K, -1)
        gx = gw = None
        if x.requires_grad:
            gx = _crop(col2im(np.matmul(w2.T, g2), padded_sp, ks, stride, out_sp), padding)
        if weight.requires_grad:
            # recomputed instead of saved: only the input is kept alive
            c = im2col(_pad(xd, padding), ks, stride, out_sp)
            gw = _batched_outer(g2, c).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, fn, "conv")


def conv_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                   padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv` with respect to its input.

    x: (B, K, *S), weight: (K, C, *k) -- the same layout ``conv`` uses to map C
    channels to K -- and bias: (C,). Output extent per axis is
    ``(n - 1) * stride - 2 * padding + k``.
    """
    _check_conv_args(x, weight, stride, padding, "conv_transpose")
    B, K = x.shape[:2]
    Kw, C = weight.shape[:2]
    if K != Kw:
        raise DimensionError(f"conv_transpose: input has {K} channels, kernel expects {Kw}")
    ks = weight.shape[2:]
    in_sp = x.shape[2:]
    padded_sp = tuple((n - 1) * stride + k for n, k in zip(in_sp, ks))
    if any(n <= 2 * padding for n in padded_sp):
        raise DimensionError(f"conv_transpose: padding {padding} consumes the whole output")
    if bias is not None and bias.shape != (C,):
        raise DimensionError(f"conv_transpose: bias {bias.shape} does not match {C} output channels")
    xd, w2 = x.data, weight.data.reshape(K, -1)
    x2 = xd.reshape(B, K, -1)
    out = _crop(col2im(np.matmul(w2.T, x2), padded_sp, ks, stride, in_sp), padding)
    if bias is not None:
        out += bias.data.reshape((1, C) + (1,) * len(in_sp))

    def fn(g):
        cols = im2col(_pad(g, padding), ks, stride, in_sp)
        gx = np.matmul(w2, cols).reshape(xd.shape) if x.requires_grad else None
        gw = _batched_outer(x2, cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=tuple(i for i in range(g.ndim) if i != 1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, fn, "conv_transpose")


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tensor t in root's graph.

    Leaf gradients add onto any existing ``.grad`` so fan-out and repeated calls
    sum. Interior tensors receive their gradient from this pass only.
    """
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("root does not depend on any tensor with requires_grad")
    order = _topological(root)
    grads = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        if not retain_graph:
            node._backward = None
            node._parents = ()
