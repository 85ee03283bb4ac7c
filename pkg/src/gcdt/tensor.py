"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small primitive set — matmul, add, mul, layer norm, softmax,
tanh, GELU, reshape/transpose, slicing, concatenation, reductions, and
masked selection — sufficient for a GPT-style network. Everything else is
composed from these, which keeps the finite-difference gradient check
exhaustive over the primitive set.

Recording is explicit: operations are appended to the active `Tape` in
execution order whenever any input requires gradients, and `Tape.backward`
replays the entries once, in reverse. One tape per training step; without
an active tape the ops run as plain numpy.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatchError(ValueError):
    """Operand dimensions do not conform."""


class Tensor:
    """n-dimensional float32/float64 array, optionally differentiable.

    Leaf tensors are user-created (parameters, inputs); op outputs are
    non-leaf. After `Tape.backward`, leaves reached by the loss have their
    gradient in the returned map; `.grad` is also set on them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # note: ascontiguousarray would promote 0-d to 1-d, so gate it
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._leaf = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of executed primitives for one backward pass.

    Entries are appended in execution order, which is a topological order
    of the computation; a backward pass walks them once in reverse.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient map for every leaf tensor the loss depends on.

        `loss` must be scalar. Leaves with requires_grad also get `.grad`
        set. Parameters the loss never touched are simply absent from the
        map (see `gradients` for zero-filling).
        """
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        if loss._leaf and loss.requires_grad:
            leaf_grads[loss] = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._entries):
            g_out = pending.pop(id(out), None)
            if g_out is None:
                continue
            for t, g in zip(inputs, backward_fn(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if t._leaf:
                    prev = leaf_grads.get(t)
                    leaf_grads[t] = g if prev is None else prev + g
                else:
                    prev = pending.get(id(t))
                    pending[id(t)] = g if prev is None else prev + g
        for t, g in leaf_grads.items():
            if not (g.flags["C_CONTIGUOUS"] and g.flags["WRITEABLE"]):
                g = g.copy()
            leaf_grads[t] = t.grad = g
        return leaf_grads

    def gradients(self, loss: Tensor, params) -> dict[str, np.ndarray]:
        """Like `backward`, but zero-fills parameters the loss never used.

        `params` is a name -> Tensor mapping; returns name -> gradient.
        """
        gmap = self.backward(loss)
        out = {}
        for name, p in params.items():
            g = gmap.get(p)
            out[name] = np.zeros_like(p.data) if g is None else g
        return out


_ACTIVE_TAPE: Tape | None = None


@contextmanager
def record():
    """Install a fresh tape for the duration of the block and yield it."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise RuntimeError("a tape is already recording; one tape per step")
    tape = Tape()
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = None


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(data, requires)
    if requires and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(a.data + b.data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit(a.data * b.data, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-d."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul operands must have ndim >= 2, got {a.ndim} and {b.ndim}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _emit(a.data @ b.data, (a, b), backward_fn)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape

    def backward_fn(g):
        return (g.reshape(orig),)

    return _emit(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inv),)

    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward_fn)


def getitem(a: Tensor, idx) -> Tensor:
    """Slice or gather. Integer-array indices scatter-add on backward."""
    out_data = np.asarray(a.data[idx])
    if out_data.base is not None:
        out_data = out_data.copy()

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(out_data, (a,), backward_fn)


def take(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather (embedding lookup): table (N, d), int indices any shape."""
    return getitem(table, np.asarray(indices, dtype=np.intp))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


# -- reductions ---------------------------------------------------------------


def _restore_reduced(g, orig_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(orig_shape)), orig_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, orig_shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    orig = a.data.shape

    def backward_fn(g):
        return (_restore_reduced(g, orig, axis, keepdims),)

    return _emit(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn
    )


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    orig = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [orig[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward_fn(g):
        return (_restore_reduced(g, orig, axis, keepdims) / count,)

    return _emit(
        np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward_fn
    )


# -- nonlinearities -----------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _emit(out, (a,), backward_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: 0.5*x*(1 + erf(x/sqrt(2)))."""
    x = a.data
    e = erf(x * _INV_SQRT2)
    out = 0.5 * x * (1.0 + e)

    def backward_fn(g):
        d = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * d,)

    return _emit(out.astype(x.dtype, copy=False), (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf entries get exactly zero weight."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    ex = np.exp(x - m)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), backward_fn)


def layer_norm(x: Tensor, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine.

    Population variance; `eps` added inside the square root.
    """
    gain = _as_tensor(gain, x.dtype)
    bias = _as_tensor(bias, x.dtype)
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    var = ((data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx.astype(data.dtype, copy=False), dgain, dbias

    return _emit(out.astype(data.dtype, copy=False), (x, gain, bias), backward_fn)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean mask (not differentiable in cond)."""
    cond = np.asarray(cond, dtype=bool)
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.dtype)

    def backward_fn(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        )

    return _emit(np.where(cond, a.data, b.data), (a, b), backward_fn)
