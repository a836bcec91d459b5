"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new Tensor whose backward closure maps the output gradient to one gradient
per parent.  Broadcast reduction happens in :meth:`Tensor.backward`.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


def _const(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _const(b, a)
    b = as_tensor(b)
    return _const(a, b), b


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return Tensor._make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip values; gradient passes only where the input was inside the range."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return Tensor._make(out, (a,), lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward)


# -- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axes, keepdims), 1.0 / n)


def logsumexp(a: Tensor, axis: int = -1, where=None) -> Tensor:
    """Stable ``log(sum(exp(a)))`` along ``axis``, optionally over a boolean mask only.

    Rows whose mask is empty are an error.
    """
    x = a.data
    if where is None:
        where = np.ones(x.shape, dtype=bool)
    else:
        where = np.broadcast_to(np.asarray(where, dtype=bool), x.shape)
    if not np.all(where.any(axis=axis)):
        raise ValueError("logsumexp over an empty set")
    m = np.max(np.where(where, x, -np.inf), axis=axis, keepdims=True)
    e = np.where(where, np.exp(np.where(where, x - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    weights = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return Tensor._make(out.astype(x.dtype, copy=False), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), backward)


# -- normalization ---------------------------------------------------------

def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs feature dim {d}")
    return Tensor._make(out, (a, gain, bias), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit L2 norm; a zero-norm row is an error."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero-norm row")
    out = x / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._make(out, (a,), backward)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data).reshape(*lead, weight.shape[1])
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        return (gx, gw, g2.sum(axis=0)) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward)


def _im2col(x: np.ndarray) -> np.ndarray:
    # (B, H, W, C) -> (B, H, W, 9 C), zero "same" padding, kernel rows then cols
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(b, h, w, 9 * c)


def _col2im(cols: np.ndarray, c: int) -> np.ndarray:
    b, h, w, _ = cols.shape
    cols = cols.reshape(b, h, w, 9, c)
    xp = np.zeros((b, h + 2, w + 2, c), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + h, dx:dx + w] += cols[:, :, :, dy * 3 + dx]
    return xp[:, 1:-1, 1:-1]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero same-padding.

    ``x`` is channels-last ``(B, H, W, Cin)``; ``weight`` is ``(3, 3, Cin, Cout)``.
    """
    if x.ndim != 4 or weight.shape[:3] != (3, 3, x.shape[-1]):
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    cin, cout = weight.shape[2], weight.shape[3]
    cols = _im2col(x.data)
    wmat = weight.data.reshape(9 * cin, cout)
    b, h, w, _ = cols.shape
    cols2 = cols.reshape(-1, 9 * cin)
    out = (cols2 @ wmat).reshape(b, h, w, cout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gcols = (g2 @ wmat.T).reshape(b, h, w, 9 * cin)
        gx = _col2im(gcols, cin)
        gw = (cols2.T @ g2).reshape(weight.shape)
        return (gx, gw, g2.sum(axis=0)) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward)


# -- shape and indexing ----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` by an integer index array (like ``np.take``)."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        gm = np.moveaxis(ga, axis, 0)
        # g axes: a[:axis] + idx.shape + a[axis+1:]
        gg = np.moveaxis(g.reshape(a.shape[:axis] + (idx.size,) + a.shape[axis + 1:]), axis, 0)
        np.add.at(gm, idx.reshape(-1), gg)
        return (ga,)

    return Tensor._make(out, (a,), backward)


def take_along(a: Tensor, indices, axis: int) -> Tensor:
    """``np.take_along_axis`` with scatter-add backward."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    if idx.ndim != a.ndim:
        raise ShapeError(f"take_along: index rank {idx.ndim} vs tensor rank {a.ndim}")
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        full_idx = np.broadcast_to(idx, g.shape)
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis] = full_idx
        np.add.at(ga, tuple(grids), g)
        return (ga,)

    return Tensor._make(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tensors, backward)
