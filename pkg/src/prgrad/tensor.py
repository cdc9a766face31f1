"""Define-by-run reverse-mode autodiff on numpy arrays.

Every differentiable call appends an entry to the active :class:`Tape`.
``backward`` walks those entries once, newest first, accumulating
gradients into the leaves that were created with ``requires_grad=True``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12

_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def shadow_precision(dtype=np.float64):
    """Create new tensors in ``dtype`` (64-bit by default) inside the block."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = dtype
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """An n-d float array with an optional gradient slot and tape handle."""

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # ---- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self):
        return self.requires_grad or self.node is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=5)}{flag})"

    # ---- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def detach(self):
        return detach(self)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def detach(t: Tensor) -> Tensor:
    """Same values as ``t``; consumers see a constant during backward."""
    return Tensor(t.data, requires_grad=False, dtype=t.dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Entry:
    kind: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable  # upstream grad -> sequence of input grads (or None)


@dataclass
class Tape:
    entries: list = field(default_factory=list)
    consumed: bool = False
    enabled: bool = True

    def record(self, kind, inputs, output, backward_fn):
        entry = Entry(kind, tuple(inputs), output, backward_fn)
        output.node = entry
        output.requires_grad = True
        self.entries.append(entry)
        return output

    def clear(self):
        for entry in self.entries:
            entry.output.node = None
            entry.output.requires_grad = False
        self.entries = []
        self.consumed = False

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None:
            raise ValueError("loss was not produced by a recorded operation")
        if self.consumed:
            raise RuntimeError("backward already ran on this tape; call zero_grad() first")
        self.consumed = True

        grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        leaves = {}
        for entry in reversed(self.entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            in_grads = entry.backward_fn(upstream)
            for inp, g in zip(entry.inputs, in_grads):
                if g is None or not isinstance(inp, Tensor) or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp.node is None:
                    leaves[key] = inp

        result = {}
        for key, leaf in leaves.items():
            g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[leaf] = leaf.grad
        return result


_tape = Tape()


def get_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording (inference and statistics)."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def backward(loss: Tensor):
    """Reverse accumulation from a scalar loss; returns ``{leaf: grad}``."""
    return _tape.backward(loss)


def zero_grad(tensors: Sequence[Tensor] = ()):
    for t in tensors:
        if t.grad is not None:
            t.grad = np.zeros_like(t.grad)
    _tape.clear()


def record(kind: str, inputs, out_data, backward_fn) -> Tensor:
    """Wrap ``out_data`` and record it if any input is on the tape."""
    out = Tensor(out_data, dtype=out_data.dtype)
    if _tape.enabled and any(isinstance(t, Tensor) and t.tracked for t in inputs):
        _tape.record(kind, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _result_dtype(*ts):
    return np.result_type(*[t.dtype for t in ts])


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    return record("add", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    out = a.data - b.data
    return record("subtract", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    out = a.data * b.data
    return record("multiply", (a, b), out,
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.dtype.type(c)
    return record("scale", (a,), out, lambda g: (g * a.dtype.type(c),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return record("matmul", (a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: axes {axes} do not match shape {a.shape}")
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return record("sum", (a,), out,
                  lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)
    return record("mean", (a,), out,
                  lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)
    return record("relu", (a,), out, lambda g: (g * mask,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", (a,), out, back)


def row_norm(a) -> Tensor:
    """L2 norm of each row of a 2-D tensor (64-bit accumulation)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"row_norm: expected a 2-D tensor, got shape {a.shape}")
    x64 = a.data.astype(np.float64)
    n = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    out = n.astype(a.dtype)

    def back(g):
        return ((g[:, None] * x64 / np.maximum(n, EPS_NORM)[:, None]).astype(a.dtype),)

    return record("row_norm", (a,), out, back)


def clamp(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return record("clamp", (a,), out, lambda g: (g * inside,))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and p != q for i, (p, q) in enumerate(zip(ref, t.shape))
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index])

    def back(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, index, g)
        return (full,)

    return record("slice", (a,), out, back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (batch x classes) vs integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}"
        )
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    out = np.asarray(loss, dtype=logits.dtype)

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return record("cross_entropy", (logits,), out, back)


OPS = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "scale": scale,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softmax": softmax,
    "row_norm": row_norm,
    "clamp": clamp,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "slice": slice_,
    "cross_entropy": cross_entropy,
}


def primitive_forward(kind: str, inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("add", [a, b])``."""
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}; known: {sorted(OPS)}") from None
    return op(*inputs, **kwargs)
