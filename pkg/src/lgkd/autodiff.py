"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A ``Tensor`` wraps a numpy array and, when any input of an operation
requires gradients, records the producing operation so ``backward()`` can
propagate exact analytic gradients through the (acyclic, dynamically
built) graph.  Everything is float64 and single-threaded per graph;
summation orders are fixed, so repeated runs are bit-identical.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

MAX_AXES = 5

CHECKPOINT_MAGIC = b"LGKD"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class TrainingError(RuntimeError):
    """Optimization cannot proceed (e.g. non-finite gradients)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or inconsistent with the model."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_axes(data: np.ndarray, op: str) -> None:
    if data.ndim > MAX_AXES:
        raise ShapeError(f"{op}: result has {data.ndim} axes, limit is {MAX_AXES}")


class Tensor:
    """Dense n-dimensional float64 value node, up to 5 axes."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_grad_borrowed")

    # make numpy defer to our reflected operators (ndarray * Tensor etc.)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_axes(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._grad_borrowed = False
        if _grad_enabled:
            self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        else:
            self.requires_grad = False
        if self.requires_grad:
            self._parents = _parents
            self._backward = _backward
        else:
            self._parents = ()
            self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no graph attachment."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        # First contribution only borrows the producer's buffer (producers
        # never mutate it afterwards); later contributions allocate.
        if self.grad is None:
            self.grad = g
            self._grad_borrowed = True
        elif self._grad_borrowed:
            self.grad = self.grad + g
            self._grad_borrowed = False
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this node; ``seed`` defaults to all-ones."""
        if not self.requires_grad:
            raise TrainingError("backward() on a tensor with no graph attachment")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor with a persistent name for optimizers/checkpoints."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    return Tensor(data, _parents=parents, _backward=backward)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    _check_axes(out, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    _check_axes(out, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _check_axes(out, "matmul")

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


# -- nonlinearities -----------------------------------------------------------


def relu(x) -> Tensor:
    x = _coerce(x)
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = _coerce(x)
    out = np.logaddexp(0.0, x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / (1.0 + np.exp(-x.data)))

    return _make(out, (x,), backward)


def exp(x) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out)

    return _make(out, (x,), backward)


def log(x) -> Tensor:
    x = _coerce(x)
    out = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(out, (x,), backward)


def square(x) -> Tensor:
    x = _coerce(x)
    out = x.data * x.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * 2.0 * x.data)

    return _make(out, (x,), backward)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only where unclipped."""
    x = _coerce(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make(out, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x._accumulate(out * (g - inner))

    return _make(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), backward)


# -- reductions and shape ops -------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge, x.shape).copy())

    return _make(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.shape[a]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    out = x.data.reshape(shape)
    _check_axes(out, "reshape")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _make(out, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _coerce(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return _make(out, (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = _coerce(x)
    out = np.broadcast_to(x.data, shape).copy()
    _check_axes(out, "broadcast_to")

    def backward(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.shape))

    return _make(out, (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(p) for p in parts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out, tuple(ts), backward)


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters back into a zero buffer."""
    x = _coerce(x)
    out = x.data[key]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[key] = g
            x._accumulate(buf)

    return _make(np.asarray(out), (x,), backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` by an integer index array."""
    x = _coerce(x)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)
    _check_axes(out, "take")

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            if axis == 0 and buf.ndim == 2 and idx.ndim == 1:
                for c in range(buf.shape[1]):
                    buf[:, c] = np.bincount(idx, weights=g[:, c], minlength=buf.shape[0])
            else:
                np.add.at(buf, tuple([slice(None)] * axis + [idx]), g)
            x._accumulate(buf)

    return _make(out, (x,), backward)


def scatter_add(values, indices, size: int) -> Tensor:
    """out[i] = sum of values[j] over all j with indices[j] == i.

    ``values`` is (N, ...) and ``indices`` an int array of length N; the
    result is (size, ...).  Accumulation follows ascending j, so the
    summation order per output slot is fixed.  The adjoint is a gather.
    """
    v = _coerce(values)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != v.shape[0]:
        raise ShapeError(f"scatter_add: indices {idx.shape} do not index values {v.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"scatter_add: index out of range for size {size}")
    out = np.zeros((size,) + v.shape[1:], dtype=np.float64)
    if v.ndim == 2:
        for c in range(v.shape[1]):
            out[:, c] = np.bincount(idx, weights=v.data[:, c], minlength=size)
    else:
        np.add.at(out, idx, v.data)

    def backward(g):
        if v.requires_grad:
            v._accumulate(g[idx])

    return _make(out, (v,), backward)


# -- convolution ---------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            h_out: int, w_out: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * h_out:sh, j:j + sw * w_out:sw]
    return cols.reshape(n, c * kh * kw, h_out * w_out)


def _col2im(dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int,
            sh: int, sw: int, h_out: int, w_out: int) -> np.ndarray:
    n, c = xp_shape[0], xp_shape[1]
    dxp = np.zeros(xp_shape, dtype=np.float64)
    d6 = dcols.reshape(n, c, kh, kw, h_out, w_out)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * h_out:sh, j:j + sw * w_out:sw] += d6[:, :, i, j]
    return dxp


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of (N, C_in, H, W) with (C_out, C_in, kh, kw)."""
    x, w = _coerce(x), _coerce(weight)
    b = _coerce(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_in2, kh, kw = w.shape
    if c_in != c_in2:
        raise ShapeError(f"conv2d: input channels {c_in} do not match kernel channels {c_in2}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (wd + 2 * pw - kw) // sw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with padding {padding}")
    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    if pointwise:
        xp = x.data
        cols = x.data.reshape(n, c_in, h * wd)  # 1x1 kernel: no patch copy needed
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        cols = _im2col(xp, kh, kw, sh, sw, h_out, w_out)
    w_mat = w.data.reshape(c_out, c_in * kh * kw)
    y = np.matmul(w_mat, cols)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {c_out} output channels")
        y += b.data.reshape(1, c_out, 1)
    out = y.reshape(n, c_out, h_out, w_out)

    def backward(g):
        g2 = g.reshape(n, c_out, h_out * w_out)
        if w.requires_grad:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            w._accumulate(dw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, g2)
            if pointwise:
                x._accumulate(dcols.reshape(x.shape))
            else:
                dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, h_out, w_out)
                dx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
                x._accumulate(dx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# -- gradient verification ----------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar; the error at each coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    x0 = Tensor(np.array(_coerce(x).data, copy=True), requires_grad=True)
    y = f(x0)
    if y.size != 1:
        raise ShapeError(f"grad_check: f returned shape {y.shape}, expected a scalar")
    y.backward()
    analytic = np.zeros_like(x0.data) if x0.grad is None else x0.grad
    flat = x0.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x0.data)).item()
        flat[i] = orig - eps
        lo = f(Tensor(x0.data)).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst = err
    return worst


# -- optimizers ---------------------------------------------------------------


def sgd_step(values: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             lr: float, weight_decay: float = 0.0) -> list[np.ndarray]:
    """One plain SGD update: v <- v - lr * (g + weight_decay * v)."""
    if lr <= 0.0:
        raise ValueError(f"sgd_step: lr must be positive, got {lr}")
    updated = []
    for i, (v, g) in enumerate(zip(values, grads)):
        if not np.isfinite(g).all():
            raise TrainingError(f"sgd_step: non-finite gradient at parameter index {i}")
        updated.append(v - lr * (g + weight_decay * v))
    return updated


class SGD:
    """Plain stochastic gradient descent over named parameters."""

    def __init__(self, params: Iterable[Parameter], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient for parameter '{p.name}'")
            p.data = p.data - self.lr * (p.grad + self.weight_decay * p.data)


class AdamW:
    """Adam with decoupled weight decay; the default training optimizer."""

    def __init__(self, params: Iterable[Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter '{p.name}' at step {self.t}")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) \
                - self.lr * self.weight_decay * p.data

# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params) -> None:
    """Write named float64 arrays to a little-endian binary checkpoint.

    Layout: magic "LGKD", u32 version, u32 entry count, then per entry
    u32 name length + utf-8 name, u32 ndim, u32 dims, raw float64 data.
    """
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = [(p.name, p.data) for p in params]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)  # keep 0-d shapes intact
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def fail(msg):
        raise CheckpointError(f"{path}: {msg}")

    if blob[:4] != CHECKPOINT_MAGIC:
        fail(f"bad magic {blob[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != CHECKPOINT_VERSION:
            fail(f"unsupported version {version}")
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if ndim else 8
            arr = np.frombuffer(blob[off:off + nbytes], dtype="<f8")
            if arr.size * 8 != nbytes:
                fail(f"truncated payload for entry '{name}'")
            off += nbytes
            out[name] = arr.reshape(shape).astype(np.float64)
        if off != len(blob):
            fail(f"{len(blob) - off} trailing bytes")
    except struct.error:
        fail("truncated header")
    return out


def load_into(path, params: Iterable[Parameter]) -> None:
    """Load a checkpoint into parameters, validating names and shapes."""
    stored = load_checkpoint(path)
    for p in params:
        if p.name not in stored:
            raise CheckpointError(f"{path}: missing parameter '{p.name}'")
        arr = stored.pop(p.name)
        if arr.shape != p.shape:
            raise CheckpointError(
                f"{path}: parameter '{p.name}' has shape {arr.shape}, model expects {p.shape}")
        p.data = arr
    if stored:
        extra = ", ".join(sorted(stored))
        raise CheckpointError(f"{path}: unexpected parameters: {extra}")
