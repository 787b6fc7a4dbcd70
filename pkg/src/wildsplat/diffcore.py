"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside
a tape they evaluate eagerly and record nothing, which doubles as inference
mode.  ``Tape.backward`` replays the recorded backward rules in reverse
recording order, so gradient accumulation order is fixed and bit-reproducible.

    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float64

_ids = itertools.count()
_local = threading.local()


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array with an optional gradient accumulator."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
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


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        stack.pop()
        return False

    def record(self, name, inputs, output, backward):
        for t in inputs:
            if t.id >= output.id:
                raise TapeError(f"op {name!r} consumes a tensor created after its output; tape would be cyclic")
        self.ops.append(_Op(name, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to every leaf that requires grad.

        Returns a map from tensor id to gradient array.  Leaf ``.grad``
        fields are accumulated in place.  When ``params`` is given, every
        listed tensor appears in the map, with zeros for non-ancestors.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {op.output.id for op in self.ops}
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        last_id = None
        for op in reversed(self.ops):
            if last_id is not None and op.output.id > last_id:
                raise TapeError("tape is not in topological order")
            last_id = op.output.id
            g = grads.pop(op.output.id, None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    gi = _unbroadcast(gi, t.shape)
                prev = grads.get(t.id)
                grads[t.id] = gi if prev is None else prev + gi
                if t.id not in produced:
                    leaves[t.id] = t
        if loss.id not in produced and loss.requires_grad:
            leaves[loss.id] = loss
        out = {}
        for tid, t in leaves.items():
            g = grads[tid].astype(t.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
            out[tid] = g
        if params is not None:
            for p in params:
                out.setdefault(p.id, np.zeros_like(p.data))
        return out


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


class no_record:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)
        return False


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(np.asarray(x) if dtype is None else np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _emit(name, inputs, data, backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(name, inputs, out, backward)
    return out


def _pair(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=_dtype_of(b)))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _dtype_of(x):
    return x.dtype if isinstance(x, Tensor) else DEFAULT_DTYPE


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def neg(a):
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def power(a, p: float):
    ad = a.data
    return _emit("pow", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sigmoid(a):
    out = expit(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a):
    pos = a.data > 0
    return _emit("relu", (a,), np.where(pos, a.data, 0), lambda g: (g * pos,))


def absolute(a):
    s = np.sign(a.data)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def sin(a):
    ad = a.data
    return _emit("sin", (a,), np.sin(ad), lambda g: (g * np.cos(ad),))


def cos(a):
    ad = a.data
    return _emit("cos", (a,), np.cos(ad), lambda g: (-g * np.sin(ad),))


def clip(a, lo, hi):
    """Clamp; the gradient passes only where the input is strictly inside."""
    inside = (a.data > lo) & (a.data < hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def stop_gradient(a):
    """Identity forward, zero backward."""
    return Tensor(a.data, requires_grad=False)


# -- reductions and shape ------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    return _emit("swapaxes", (a,), np.swapaxes(a.data, i, j), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape):
    return _emit("broadcast", (a,), np.broadcast_to(a.data, shape), lambda g: (g,))


def getitem(a, idx):
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("getitem", (a,), a.data[idx], bw)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _emit("stack", tuple(tensors), np.stack([t.data for t in tensors], axis=axis),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad2d(a, pad_h: int, pad_w: int):
    """Zero-pad the trailing two axes at the bottom/right."""
    widths = [(0, 0)] * (a.ndim - 2) + [(0, pad_h), (0, pad_w)]
    h, w = a.shape[-2:]
    return _emit("pad2d", (a,), np.pad(a.data, widths), lambda g: (g[..., :h, :w],))


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            gb = np.tensordot(g, ad, axes=(list(range(g.ndim)), list(range(ad.ndim - 1))))
            return ga, gb
        if ad.ndim == 1:
            ga = bd @ g
            return ga, np.multiply.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, bw)


# -- convolution ---------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0):
    """NCHW convolution (cross-correlation) with square stride and zero padding."""
    xd, wd = x.data, w.data
    n, c, h, wid = xd.shape
    o, _, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.tensordot(
                    g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wid]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, np.ascontiguousarray(out), bw)


def upsample_nearest2x(x: Tensor):
    xd = x.data
    out = xd.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _emit("upsample2x", (x,), out, bw)


# -- custom ops ----------------------------------------------------------

def custom_op(name: str, inputs: Sequence[Tensor], output: np.ndarray,
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Register an externally computed forward value with a hand-written backward.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    return _emit(name, tuple(inputs), output, backward)


# -- gradient checking ---------------------------------------------------

@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple[int, int] | None
    nonfinite: tuple[int, int] | None = None

    @property
    def ok(self) -> bool:
        return self.nonfinite is None

    def passed(self, tol: float) -> bool:
        return self.ok and self.max_error < tol


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> GradCheckResult:
    """Compare tape gradients of ``f()`` with central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Parameters are perturbed in place and restored.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    worst, worst_at = 0.0, None
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        ga = analytic[p.id].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().data)
            flat[k] = orig - h
            fm = float(f().data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckResult(float("inf"), (pi, k), nonfinite=(pi, k))
            num = (fp - fm) / (2 * h)
            err = abs(ga[k] - num) / max(1.0, abs(num))
            if err > worst:
                worst, worst_at = err, (pi, k)
    return GradCheckResult(worst, worst_at)


def value_and_grad(f: Callable[[], Tensor], params: Sequence[Tensor]):
    with Tape() as tape:
        loss = f()
    return loss, tape.backward(loss, params)
