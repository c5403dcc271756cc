"""Dense tensors with reverse-mode automatic differentiation.

All model math in this package flows through the ops defined here. A
Tensor wraps a numpy array; each differentiable op records a backward
closure onto the active Tape, and ``Tape.backward`` replays the records
in reverse execution order. Because records are appended in execution
order, the reversed walk is a valid topological order of the dataflow
graph, and gradients accumulate additively across uses of a tensor.

Training runs at float32. Gradient verification uses float64, where
central finite differences are trustworthy.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

DTYPES = {"f32": np.float32, "f64": np.float64}
LN_EPS = 1e-5
MASK_FILL = -1e9


class Tensor:
    """A dense n-d array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, (np.ndarray, np.generic)) and dtype is None and data.dtype in (np.float32, np.float64):
            # keep the incoming dtype; np.generic covers 0-d reduction results
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias another tensor's gradient buffer
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={'set' if self.grad is not None else 'none'}{tag})"

    # operator sugar, so model code reads like the math
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass, then call
    ``backward(loss)`` once. A second backward without ``reset`` is an
    error; replaying a spent tape would double-accumulate gradients.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise StateError("tape stack corrupted: exited a tape that was not on top")

    def __len__(self) -> int:
        return len(self._records)

    @property
    def spent(self) -> bool:
        return self._spent

    def record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise StateError("backward() already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise StateError("backward() on an empty tape: no operations were recorded")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()
        self._spent = True

    def reset(self) -> None:
        self._records.clear()
        self._spent = False


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable[[], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def const(data, dtype=np.float32) -> Tensor:
    """Non-trainable tensor with an explicit dtype."""
    return Tensor(np.asarray(data, dtype=dtype))


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accum(_unbroadcast(g @ _swap_last(b.data), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(_swap_last(a.data) @ g, b.shape))

    return _record(out, (a, b), bwd)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose_last needs rank >= 2, got {x.shape}")
    out = Tensor(_swap_last(x.data))

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(_swap_last(out.grad))

    return _record(out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(out.grad * s)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(out.grad * (x.data > 0))

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(out.grad * y * (1.0 - y))

    return _record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(out.grad / x.data)

    return _record(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized by row max."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _record(out, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x._accum(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _record(out, (x,), bwd)


def layer_norm_core(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh)

    def bwd():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        gm = g.mean(axis=-1, keepdims=True)
        gxh = (g * xh).mean(axis=-1, keepdims=True)
        x._accum(inv * (g - gm - xh * gxh))

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Layer normalization with learned elementwise gain and bias."""
    return add(mul(layer_norm_core(x, eps), gain), bias)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty sequence")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd():
        g = out.grad
        if g is None:
            return
        for p, piece in zip(parts, np.split(g, splits, axis=ax)):
            if p.requires_grad:
                p._accum(piece)

    return _record(out, tuple(parts), bwd)


def concat_cols(*parts: Tensor) -> Tensor:
    """Concatenate along the feature (last) axis."""
    return concat(parts, axis=-1)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    ax = axis if axis >= 0 else x.ndim + axis
    if not (0 <= start and start + length <= x.shape[ax]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {ax} of {x.shape}")
    idx = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(x.ndim))
    out = Tensor(x.data[idx].copy())

    def bwd():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accum(full)

    return _record(out, (x,), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]}), got min {ids.min()} max {ids.max()}")
    out = Tensor(table.data[ids])

    def bwd():
        g = out.grad
        if g is None or not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accum(gt)

    return _record(out, (table,), bwd)


def dropout(x: Tensor, keep_prob: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or keep_prob is 1."""
    if not (0.0 < keep_prob <= 1.0):
        raise ShapeError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not train or keep_prob >= 1.0:
        return x
    if rng is None:
        raise StateError("training-mode dropout needs an rng stream")
    mask = (rng.random(x.shape) < keep_prob).astype(x.data.dtype) / x.data.dtype.type(keep_prob)
    out = Tensor(x.data * mask)

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(out.grad * mask)

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(np.broadcast_to(out.grad, x.shape))

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))

    def bwd():
        if out.grad is not None and x.requires_grad:
            x._accum(np.broadcast_to(out.grad / n, x.shape))

    return _record(out, (x,), bwd)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = axis if axis >= 0 else x.ndim + axis
    n = x.shape[ax]
    out = Tensor(x.data.mean(axis=ax, keepdims=keepdims))

    def bwd():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, ax)
        x._accum(np.broadcast_to(g / n, x.shape))

    return _record(out, (x,), bwd)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = axis if axis >= 0 else x.ndim + axis
    out = Tensor(x.data.sum(axis=ax, keepdims=keepdims))

    def bwd():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, ax)
        x._accum(np.broadcast_to(g, x.shape))

    return _record(out, (x,), bwd)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{what} contains non-finite values")
    return x


def zero_grads(params) -> None:
    """Drop gradients on an iterable or mapping of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None


class ParamRegistry:
    """Flat, ordered registry of trainable tensors.

    Creation order is the initialization draw order, so a fixed seed and
    config reproduce parameters bit for bit. Names are dotted paths used
    by checkpoints and the optimizer.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._tensors: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise StateError(f"parameter {name!r} registered twice")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, shape=None) -> Tensor:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))
        return self._register(name, data)

    def normal(self, name: str, shape, std: float, rng: np.random.Generator) -> Tensor:
        return self._register(name, rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape))

    def named(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __len__(self) -> int:
        return len(self._tensors)
