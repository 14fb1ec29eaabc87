"""Dense float tensors with a define-by-run reverse-mode tape.

Every op returns a new :class:`Tensor`. When any input requires a gradient
(and recording is enabled) the result keeps references to its parents and a
closure mapping the output gradient to per-parent gradients. ``backward``
replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels

_state = {"grad": True, "check_finite": True, "dtype": np.float32}


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def set_default_dtype(dtype) -> None:
    _state["dtype"] = np.dtype(dtype).type


def get_default_dtype():
    return _state["dtype"]


def set_check_finite(flag: bool) -> None:
    _state["check_finite"] = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _state["dtype"]
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _state["dtype"]))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {getattr(backward_fn, '__qualname__', 'op')}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- broadcasting ------------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    # scalars (0-d) broadcast freely; otherwise equal rank, each dim equal or 1
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch {a} vs {b}: only singleton-dim broadcasting is allowed")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    shape = _broadcast_shape(a.shape, b.shape)
    return a, b, shape


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    def bw(g):
        gb = g / bd
        return _unbroadcast(gb, ad.shape), _unbroadcast(-gb * out, bd.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid_np(ad)

    def bw(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _make(ad * s, (a,), bw)


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is required for the binary ops."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"exp": exp, "log": log, "neg": neg, "sigmoid": sigmoid, "tanh": tanh,
             "silu": silu, "abs": tabs, "square": square}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and shape ops --------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes).copy(), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if _is_advanced(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(np.array(a.data[idx]), (a,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis with a fixed integer index array."""
    indices = np.asarray(indices)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def pad2d(a: Tensor, pad_h: tuple, pad_w: tuple) -> Tensor:
    """Zero-pad the two trailing axes of an NCHW tensor."""
    (t, b), (l, r) = pad_h, pad_w
    h, w = a.shape[-2:]

    def bw(g):
        return (g[..., t:t + h, l:l + w],)

    return _make(np.pad(a.data, ((0, 0), (0, 0), (t, b), (l, r))), (a,), bw)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return a
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (a,), bw)


def avgpool(a: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return a
    n, c, h, w = a.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {factor}")
    out = a.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def bw(g):
        g = g / (factor * factor)
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3),)

    return _make(out, (a,), bw)


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw)


def inverse(a: Tensor, lower: bool | None = None) -> Tensor:
    """Inverse of a square matrix.

    ``lower=True``/``False`` marks a triangular matrix and uses a triangular
    solve; ``None`` falls back to a general solve.
    """
    from scipy.linalg import solve_triangular

    ad = a.data
    eye = np.eye(ad.shape[0], dtype=ad.dtype)
    if lower is None:
        out = np.linalg.solve(ad, eye)
    else:
        out = solve_triangular(ad, eye, lower=lower)

    def bw(g):
        ga = -(out.T @ g @ out.T)
        # a triangular solve never reads the other triangle
        if lower is True:
            ga = np.tril(ga)
        elif lower is False:
            ga = np.triu(ga)
        return (ga,)

    return _make(out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input and (O, C/groups, K, K) weights."""
    n, c, h, wd = x.shape
    o, cg, k, k2 = w.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c % groups or o % groups or cg * groups != c:
        raise ShapeError(f"channel/group mismatch: C={c}, weight {w.shape}, groups={groups}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    og = o // groups
    xd = x.data
    wmat = w.data.reshape(groups, og, cg * k * k)

    if k == 1 and stride == 1 and pad == 0:
        cols = xd.transpose(1, 0, 2, 3).reshape(groups, cg, n * ho * wo)
    else:
        cols = kernels.im2col(xd, k, stride, pad, ho, wo).reshape(groups, cg * k * k, n * ho * wo)
    out = np.matmul(wmat, cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(gout):
        g = gout.transpose(1, 0, 2, 3).reshape(groups, og, n * ho * wo)
        gw = np.matmul(g, np.swapaxes(cols, 1, 2)).reshape(w.shape)
        gcols = np.matmul(np.swapaxes(wmat, 1, 2), g)
        if k == 1 and stride == 1 and pad == 0:
            gx = gcols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
        else:
            gx = kernels.col2im(gcols.reshape(c, k, k, n, ho, wo), h, wd, stride, pad)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw)


# -- backward -------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a map ``id(leaf) -> gradient``. Leaves that do not reach the loss
    keep whatever ``.grad`` they had (callers zero them; see ``zero_grads``).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return leaves


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def grad(loss: Tensor, params: Sequence[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``params``; unreachable params get zeros."""
    zero_grads(params)
    backward(loss)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    zero_grads(params)
    return out
