"""Dense tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad``, are appended to that tape together with a
closure computing the vector-Jacobian product. ``Tape.backward`` replays the
records in reverse. Outside a tape nothing is recorded, which is the inference
path.

Every primitive checks its output for NaN/Inf and raises
:class:`~catsagg.errors.NonFiniteError` instead of propagating it.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from catsagg.errors import DimensionError, NonFiniteError, ParameterError, UsageError

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; a tape is confined to the thread that entered it::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is None:
                    # leaf: accumulate across backward calls
                    parent.grad = pg.astype(parent.dtype, copy=True) if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg


def backward(loss: "Tensor") -> None:
    """Backpropagate from ``loss`` through the tape that recorded it."""
    if loss._tape is None:
        raise UsageError("loss is not reachable from any parameter on a tape")
    loss._tape.backward(loss)


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_axis(self, axis, keepdims)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, parents, vjp))
    return out


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


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), vjp, "div")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _emit(0.5 * x.data * (1.0 + t), (x,), vjp, "gelu")


def norm_lastdim(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis. The subgradient at zero is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n[..., None] > 0, x.data / n[..., None], 0.0)
        return (g[..., None] * unit,)

    return _emit(n, (x,), vjp, "norm_lastdim")


# -------------------------------------------------------------- linear algebra


def _flat_mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for batched ``a`` and a plain 2-D ``b`` as one GEMM."""
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    shared_weight = b.ndim == 2 and a.ndim > 2

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            bt = np.swapaxes(b.data, -1, -2)
            ga = _flat_mm(g, bt) if shared_weight else _unbroadcast(g @ bt, a.shape)
        if b.requires_grad:
            if shared_weight:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    out = _flat_mm(a.data, b.data) if shared_weight else a.data @ b.data
    return _emit(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------- shape algebra


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.swapaxes(x.data, axis1, axis2)
    except (ValueError, np.exceptions.AxisError):
        raise DimensionError(f"swapaxes({axis1}, {axis2}) invalid for shape {x.shape}") from None
    return _emit(out, (x,), lambda g: (np.swapaxes(g, axis1, axis2),), "swapaxes")


def transpose_last2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2 needs ndim >= 2, got shape {x.shape}")
    return swapaxes(x, -1, -2)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_lastdim needs at least one tensor")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim: leading dims differ, {ts[0].shape} vs {t.shape}"
            )
    splits = np.cumsum([t.shape[-1] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), vjp, "concat_lastdim")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack needs at least one tensor")
    if any(t.shape != ts[0].shape for t in ts):
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(out, tuple(ts), vjp, "stack")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    if any(not -ndim <= a < ndim for a in axes):
        raise DimensionError(f"axis {axis} out of range for ndim {ndim}")
    return tuple(sorted(int(a) % ndim for a in axes))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(out), (x,), vjp, "sum")


def mean_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit(np.asarray(out), (x,), vjp, "mean_axis")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def slice_(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"index {index!r} invalid for shape {x.shape}: {exc}") from None
    basic = _is_basic_index(index)
    if basic:
        out = out.copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit(np.asarray(out), (x,), vjp, "slice")


# -------------------------------------------------------------- normalisation


def softmax_lastdim(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``x / temperature`` along the last axis, max-subtracted."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / temperature,)

    return _emit(y, (x,), vjp, "softmax_lastdim")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise DimensionError("layernorm needs a non-empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm: gamma {gamma.shape} / beta {beta.shape} must both be ({d},)"
        )
    if not eps > 0:
        raise ParameterError(f"layernorm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _emit(xhat * gamma.data + beta.data, (x, gamma, beta), vjp, "layernorm")
