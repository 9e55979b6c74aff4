"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
any input requires a gradient, the output keeps references to its parents and a
closure that maps the output gradient to parent gradients. ``backward`` walks
the recorded graph in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError, NumericError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -----------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"grad shape {grad.shape} does not match tensor shape {self.shape}")
        order = _topological_order(self)
        _accumulate(self, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(out: np.ndarray, op: str) -> None:
    with np.errstate(over="ignore", invalid="ignore"):
        total = out.sum()
    if not np.isfinite(total) and not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    _check_broadcast(a.shape, b.shape)
    return a, b


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"incompatible shapes {sa} and {sb}")


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / b.data)
        if b.requires_grad:
            _accumulate(b, -g * out / b.data)

    return _result(out, (a, b), backward, "div")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    factor = x.dtype.type(factor)

    def backward(g):
        _accumulate(x, g * factor)

    return _result(x.data * factor, (x,), backward, "scale")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand (the usual weight matrix) is applied to every leading
    index of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2:
        _check_broadcast(a.shape[:-2], b.shape[:-2])
    flat = b.ndim == 2 and a.ndim > 2
    k, n = b.shape[-2:]
    if flat:
        # one large GEMM instead of numpy's per-matrix loop
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if flat:
                _accumulate(a, (g.reshape(-1, n) @ b.data.T).reshape(a.shape))
            else:
                _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), backward, "matmul")


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward, "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(
                f"concat shape mismatch along axis {axis}: {[t.shape for t in tensors]}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            _accumulate(t, piece)

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not (item is None or item is Ellipsis or isinstance(item, (int, np.integer, slice))):
            raise DimensionError(f"only basic indexing is supported, got {type(item).__name__}")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"index {index} out of range for shape {x.shape}") from exc

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        _accumulate(x, gx)

    return _result(np.array(out, copy=True), (x,), backward, "slice")


def take_along_axis(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather ``x`` along ``axis`` at integer ``indices`` (numpy semantics)."""
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    out = np.take_along_axis(x.data, indices, axis=ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        grids = list(np.ix_(*[np.arange(s) for s in indices.shape]))
        grids[ax] = indices
        np.add.at(gx, tuple(grids), g)
        _accumulate(x, gx)

    return _result(out, (x,), backward, "take_along_axis")


# -- elementwise unary -----------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return _result(out, (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        _accumulate(x, g * pos)

    return _result(out, (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _result(out, (x,), backward, "log")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    d = x.data
    out = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0)

    def backward(g):
        _accumulate(x, g * (0.5 * (1.0 + np.tanh(0.5 * d))))

    return _result(out, (x,), backward, "softplus")


def abs_(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), backward, "abs")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            _accumulate(x, g * 0.5 / out)

    return _result(out, (x,), backward, "sqrt")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); no gradient flows where the floor is active."""
    keep = x.data >= lo
    out = np.where(keep, x.data, x.dtype.type(lo))

    def backward(g):
        _accumulate(x, g * keep)

    return _result(out, (x,), backward, "clamp_min")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Write ``value`` where ``mask`` is set; those positions get no gradient."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, x.dtype.type(value), x.data)
    except ValueError as exc:
        raise DimensionError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from exc
    if out.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} would enlarge {x.shape}")

    def backward(g):
        _accumulate(x, np.where(mask, 0, g))

    return _result(out, (x,), backward, "masked_fill")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) so eval needs no rescale."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / count)


# -- normalization / attention helpers -------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; gradient routed accordingly."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _pair(a, b)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.where(mask, g, 0))
        if b.requires_grad:
            _accumulate(b, np.where(mask, 0, g))

    return _result(out, (a, b), backward, "where")


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
