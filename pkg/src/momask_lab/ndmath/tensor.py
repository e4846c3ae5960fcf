"""Array values and the reverse-mode tape.

Operations only record themselves while a :class:`Tape` is active on the
current thread and at least one input requires a gradient. Outside a tape
every op is a plain numpy computation, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ShapeError(ValueError):
    """Operand extents do not conform."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """An immutable n-d real array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of forward ops for one gradient computation.

    Use as a context manager; nested tapes are allowed and only the
    innermost records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, target: Tensor, sources: Iterable[Tensor], seed=None) -> list[np.ndarray]:
        """Backpropagate from ``target`` and return d target / d source.

        Sources that do not participate receive zeros. A source listed
        twice (tied parameters) gets the same accumulated gradient.
        """
        sources = list(sources)
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            if target.data.size != 1:
                raise ShapeError(f"gradient seed required for non-scalar target {target.shape}")
            seed = np.ones_like(target.data)
        grads[id(target)] = np.asarray(seed, dtype=target.dtype)
        wanted = {id(s) for s in sources}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            if id(node.out) not in wanted:
                del grads[id(node.out)]
            input_grads = node.backward(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False))
        return out


def active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def parameter(data, name: str | None = None, dtype=DEFAULT_DTYPE) -> Tensor:
    """A trainable leaf, stored as float32 unless ``dtype`` says otherwise."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an op output and register its backward on the active tape."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return record(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def abs_(a: Tensor) -> Tensor:
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity (same buffer); contributes no gradient to ``a``."""
    return Tensor(a.data)


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record(a.data @ b.data, (a, b), backward)


# -- reductions (64-bit accumulation) ----------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return record(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


# -- shape manipulation --------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return record(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` with a scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise IndexError(f"row id out of range [0, {rows}): min={index.min()} max={index.max()}")

    def backward(g):
        out = np.zeros_like(table.data)
        flat = g.reshape(-1, table.shape[-1])
        np.add.at(out, index.reshape(-1), flat)
        return (out,)

    return record(table.data[index], (table,), backward)


def take_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather one entry per row along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    picked = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, index[..., None], g[..., None], axis=-1)
        return (out,)

    return record(picked, (a,), backward)


def pad_time(a: Tensor, left: int, right: int, mode: str = "constant") -> Tensor:
    """Pad the last axis; ``mode`` is ``constant`` (zeros) or ``edge``."""
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    out = np.pad(a.data, width, mode=mode)
    n = a.shape[-1]

    def backward(g):
        core = g[..., left:left + n].copy()
        if mode == "edge":
            if left:
                core[..., 0] += g[..., :left].sum(axis=-1)
            if right:
                core[..., -1] += g[..., left + n:].sum(axis=-1)
        return (core,)

    return record(out, (a,), backward)


def repeat_time(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    out = np.repeat(a.data, factor, axis=-1)

    def backward(g):
        return (g.reshape(*a.shape, factor).sum(axis=-1),)

    return record(out, (a,), backward)


def unfold_time(a: Tensor, kernel: int, stride: int) -> Tensor:
    """Sliding windows over the last axis of ``(B, C, T)``.

    Returns ``(B, T_out, C * kernel)`` with channel-major window layout.
    """
    b, c, t = a.shape
    t_out = (t - kernel) // stride + 1
    if t_out < 1:
        raise ShapeError(f"sequence of length {t} shorter than kernel {kernel}")
    sb, sc, st = a.data.strides
    win = np.lib.stride_tricks.as_strided(
        a.data, shape=(b, t_out, c, kernel), strides=(sb, st * stride, sc, st), writeable=False
    )
    out = np.ascontiguousarray(win).reshape(b, t_out, c * kernel)

    def backward(g):
        g = g.reshape(b, t_out, c, kernel)
        grad = np.zeros_like(a.data)
        stop = stride * (t_out - 1) + 1
        for j in range(kernel):
            grad[:, :, j:j + stop:stride] += np.transpose(g[:, :, :, j], (0, 2, 1))
        return (grad,)

    return record(out, (a,), backward)
