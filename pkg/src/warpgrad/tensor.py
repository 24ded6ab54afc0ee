"""Dense float64 tensors and a reverse-mode differentiation tape.

Values are plain numpy arrays wrapped in :class:`Tensor`. Operations executed
inside an active :class:`Tape` are recorded in creation order, which is
automatically a topological order, and ``Tape.backward`` replays them in
reverse. Outside of a tape the same functions just compute values.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(x * x)
    >>> grads = tape.backward(loss)
    >>> grads[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError, TapeError

__all__ = [
    "Tensor", "Tape", "Parameter", "Gradients", "as_tensor", "op",
    "set_debug", "debug_enabled", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "abs", "sqrt",
    "tanh", "sigmoid", "leaky_relu", "clip", "square", "sum", "mean",
    "reshape", "transpose", "concat", "slice", "conv2d", "conv1d",
    "instance_norm", "softmax", "bilinear_upsample", "inv", "upsample_matrix",
]

_local = threading.local()
_debug = os.environ.get("WARPGRAD_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Enable or disable the non-finite screen run after every op."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array, optionally a leaf that gradients flow to."""

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._node = None
        return t

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
    def node_id(self) -> Optional[int]:
        return None if self._node is None else self._node[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{extra})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)

    def __getitem__(self, index): return slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64))


@dataclass
class Parameter:
    """A named model weight. The optimizer swaps ``value`` for a new tensor each step."""

    name: str
    value: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.value.requires_grad = self.trainable
        self.value.name = self.name

    def assign(self, data: np.ndarray) -> None:
        if data.shape != self.value.shape:
            raise DimensionError(f"{self.name}: cannot assign {data.shape} to {self.value.shape}")
        self.value = Tensor(data, requires_grad=self.trainable, name=self.name)


class _Node:
    __slots__ = ("name", "inputs", "backward", "shape", "leaf")

    def __init__(self, name, inputs, backward, shape, leaf=None):
        self.name = name
        self.inputs = inputs
        self.backward = backward
        self.shape = shape
        self.leaf = leaf


class Tape:
    """Records ops executed while it is active; consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _track(self, t: Tensor) -> Optional[int]:
        if t._node is not None and t._node[0] is self:
            return t._node[1]
        if t.requires_grad:
            key = id(t)
            idx = self._leaves.get(key)
            if idx is None:
                idx = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, t.shape, leaf=t))
                self._leaves[key] = idx
            return idx
        return None

    def _record(self, name, out: Tensor, parents, backward) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        ids = tuple(self._track(p) for p in parents)
        if all(i is None for i in ids):
            return
        out._node = (self, len(self.nodes))
        self.nodes.append(_Node(name, ids, backward, out.shape))

    def node_id_of(self, t: Tensor) -> Optional[int]:
        if t._node is not None and t._node[0] is self:
            return t._node[1]
        return self._leaves.get(id(t))

    def backward(self, loss: Tensor) -> "Gradients":
        """Propagate d(loss)/d(node) to every recorded node.

        The tape is consumed: a second call raises :class:`TapeError`.
        """
        if self.consumed:
            raise TapeError("backward() already called on this tape")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        root = self.node_id_of(loss)
        if root is None:
            raise TapeError("loss was not produced on this tape")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[root] = np.ones(loss.shape)
        reached = np.zeros(len(self.nodes), dtype=bool)
        reached[root] = True
        for i in range(root, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if not reached[i] or node.backward is None:
                continue
            if g is None:
                g = np.zeros(node.shape)
            in_grads = node.backward(g)
            for pid, pg in zip(node.inputs, in_grads):
                if pid is None:
                    continue
                reached[pid] = True
                if pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        for i in np.flatnonzero(reached):
            if grads[i] is None:
                grads[i] = np.zeros(self.nodes[i].shape)
        self.consumed = True
        for node in self.nodes:
            node.backward = None
        return Gradients(self, grads)


class Gradients:
    """Lookup of gradients by tensor; unreached tensors map to zeros."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        idx = self._tape.node_id_of(t)
        if idx is None or self._grads[idx] is None:
            return np.zeros(t.shape)
        return self._grads[idx]

    def __contains__(self, t: Tensor) -> bool:
        idx = self._tape.node_id_of(t)
        return idx is not None and self._grads[idx] is not None

    def leaves(self) -> dict:
        return {n.leaf.name or f"leaf{i}": self._grads[i]
                for i, n in enumerate(self._tape.nodes) if n.leaf is not None}


def backward(loss: Tensor) -> Gradients:
    if loss._node is None:
        raise TapeError("loss is not attached to any tape")
    return loss._node[0].backward(loss)


def op(name: str, out: np.ndarray, parents: Sequence[Tensor],
       backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a forward value and register its backward rule on the active tape.

    ``backward_fn`` maps the output gradient to a tuple of input gradients
    (``None`` for inputs that need none), aligned with ``parents``.
    """
    if _debug and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output from op '{name}'")
    t = Tensor._wrap(np.asarray(out, dtype=np.float64))
    tape = _active_tape()
    if tape is not None:
        tape._record(name, t, parents, backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return op("add", a.data + b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return op("sub", a.data - b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return op("mul", a.data * b.data, (a, b),
              lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return op("div", out, (a, b),
              lambda g: (_unbroadcast(g / b.data, a.shape),
                         _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return op("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return op("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return op("matmul", out, (a, b), bw)


def inv(a) -> Tensor:
    """Batched inverse of square matrices in the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"inv: needs square matrices, got {a.shape}")
    out = np.linalg.inv(a.data)

    def bw(g):
        ot = np.swapaxes(out, -1, -2)
        return (-np.matmul(np.matmul(ot, g), ot),)

    return op("inv", out, (a,), bw)


# pointwise nonlinearities

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split branches keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return op("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return op("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape ops

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return op("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return op("mean", out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return op("concat", out, ts, bw)


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return op("slice", np.array(out), (a,), bw)


# structured ops

def _check_conv(name, x, w, spatial):
    if x.ndim != spatial + 2 or w.ndim != spatial + 2:
        raise DimensionError(f"{name}: input {x.shape} / kernel {w.shape} have wrong rank")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"{name}: input {x.shape} has {x.shape[1]} channels, "
                             f"kernel {w.shape} expects {w.shape[1]}")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,kh,kw), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv2d", x, w, 2)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    # channel-major layout keeps the column matrix and its scatter-back contiguous
    xc = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xc
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(C * kh * kw, B * Ho * Wo)
    wm = w.data.reshape(O, -1)
    out = (wm @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1, 1)
        parents.append(b)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        dcols = (wm.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                    dcols[:, i, j]
        if padding:
            gxp = gxp[:, :, padding:padding + H, padding:padding + W]
        grads = [gxp.transpose(1, 0, 2, 3), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return op("conv2d", out, parents, bw)


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Dilated 1D cross-correlation of ``x`` (B,C,L) with ``w`` (O,C,k)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv1d", x, w, 1)
    B, C, L = x.shape
    O, _, k = w.shape
    span = dilation * (k - 1) + 1
    if L + 2 * padding < span:
        raise DimensionError(f"conv1d: dilated kernel span {span} exceeds padded length "
                             f"{L + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    Lo = (L + 2 * padding - span) // stride + 1
    idx = np.arange(Lo)[:, None] * stride + np.arange(k)[None, :] * dilation
    cols = xp[:, :, idx].transpose(0, 2, 1, 3).reshape(B * Lo, C * k)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(B, Lo, O).transpose(0, 2, 1)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1)
        parents.append(b)

    def bw(g):
        gm = g.transpose(0, 2, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(w.shape)
        dcols = (gm @ wm).reshape(B, Lo, C, k)
        gxp = np.zeros(xp.shape)
        for j in range(k):
            start = j * dilation
            gxp[:, :, start:start + stride * (Lo - 1) + 1:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding:padding + L] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return op("conv1d", out, parents, bw)


def instance_norm(x, eps: float = 1e-8) -> Tensor:
    """Normalize each (case, channel) slice over its spatial axes to mean 0, variance 1."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"instance_norm: needs (B,C,...) input, got {x.shape}")
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    sd = np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc / sd

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return ((g - gm - xhat * gxm) / sd,)

    return op("instance_norm", xhat, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return op("softmax", s, (x,), bw)


def upsample_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor, n) linear-interpolation matrix; output index X reads input X/factor.

    The grid is corner aligned (output 0 sits on input 0), matching stride-2
    convolutions with kernel 3 and padding 1. Reads past the last input clamp.
    """
    src = np.arange(n * factor) / factor
    i0 = np.minimum(np.floor(src).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    t = np.clip(src - i0, 0.0, 1.0)
    t = np.where(i0 == i1, 0.0, t)
    m = np.zeros((n * factor, n))
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_upsample(x, factor: int) -> Tensor:
    """Upsample the last two axes of ``x`` by an integer factor."""
    x = as_tensor(x)
    if factor < 1 or int(factor) != factor:
        raise ContractError(f"bilinear_upsample: factor must be a positive integer, got {factor}")
    if factor == 1:
        return x
    ah = upsample_matrix(x.shape[-2], factor)
    aw = upsample_matrix(x.shape[-1], factor)
    out = ah @ x.data @ aw.T
    return op("bilinear_upsample", out, (x,), lambda g: (ah.T @ g @ aw,))
