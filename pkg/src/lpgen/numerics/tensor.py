"""Dense float64 tensors with a per-forward reverse-mode tape.

A graph is only recorded when at least one input has ``requires_grad`` set,
so inference with frozen parameters builds no tape at all.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic metadata -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"implicit backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + g
            # intermediate nodes only need their gradient during the sweep
            if node._parents:
                node.grad = None
        # release the tape
        for node in order:
            node._parents = ()
            node._backward = None

    # -- operator sugar -------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


# -- reductions and shape -------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)

    return _result(a.data[idx], (a,), back)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """``table[ids]`` for an integer index array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), back)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_rows(x, mask_bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum.

    ``mask_bias`` is a constant additive term (e.g. a large negative value on
    padded keys).
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = x.data if mask_bias is None else x.data + mask_bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), back)


# -- convolution ----------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``x`` is C×H×W or N×C×H×W, ``w`` is O×C×kh×kw."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim == 3:
        return reshape(conv2d(reshape(x, (1,) + x.shape), w, b, stride, padding),
                       _conv_out_shape(x.shape, w.shape, stride, padding))
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    ho, wo = _conv_out_shape(x.shape[1:], w.shape, stride, padding)[1:]

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    # cols: (C, kh, kw, N, Ho, Wo) flattened to (C*kh*kw, N*Ho*Wo)
    cols = np.empty((c, kh, kw, n, ho, wo))
    xpt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i : i + hs : stride, j : j + ws : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = wmat @ cols
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
        parents.append(b)
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxpt = np.zeros((c, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxpt[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i, j]
            gxp = gxpt.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, parents, back)


def _conv_out_shape(in_shape, w_shape, stride, padding):
    c, h, wd = in_shape[-3:]
    o, _, kh, kw = w_shape
    hn, wn = h + 2 * padding - kh, wd + 2 * padding - kw
    if hn < 0 or wn < 0:
        raise DimensionError(f"kernel {w_shape[2:]} larger than padded input {(h, wd)}")
    if hn % stride or wn % stride:
        raise DimensionError(
            f"non-integral conv output extent for input {(h, wd)}, kernel {(kh, kw)}, "
            f"stride {stride}, padding {padding}")
    return (o, hn // stride + 1, wn // stride + 1)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# -- normalisation (composites of the primitives above) -------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gain + bias


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"{c} channels not divisible into {groups} groups")
    xg = reshape(x, (n, groups, -1))
    mu = mean(xg, axis=-1, keepdims=True)
    xc = xg - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    xn = reshape(xc / sqrt(var + eps), (n, c, h, w))
    return xn * reshape(gain, (1, c, 1, 1)) + reshape(bias, (1, c, 1, 1))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return mean(d * d)
