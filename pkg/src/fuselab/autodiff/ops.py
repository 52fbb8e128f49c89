"""Differentiable operations on :class:`Tensor`.

Image tensors are laid out ``(N, C, H, W)``.  Binary ops broadcast with
numpy rules and reduce gradients back to each operand's shape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeError
from . import resample as _rs
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return make_node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return make_node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return make_node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    # make_node reports non-finite results, so numpy need not warn as well
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return make_node(out, (a, b), back, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def back(g):
        return (g * exponent * a.data ** (exponent - 1.0),)
    return make_node(a.data ** exponent, (a,), back, "pow")


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (g * np.sign(a.data),)
    return make_node(np.abs(a.data), (a,), back, "abs")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)

    def back(g):
        return (g * scale,)
    return make_node(a.data * scale, (a,), back, "leaky_relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def back(g):
        return (g * out * (1.0 - out),)
    return make_node(out, (a,), back, "sigmoid")


# -- reductions and reshaping ---------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_node(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (g.reshape(a.shape),)
    return make_node(a.data.reshape(shape), (a,), back, "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return make_node(out, tuple(tensors), back, "concat")


def take(a, index: np.ndarray) -> Tensor:
    """Gather ``a.ravel()[index]``; the backward pass scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    flat = index.ravel()

    def back(g):
        acc = np.bincount(flat, weights=g.ravel(), minlength=a.size)
        return (acc.reshape(a.shape),)
    return make_node(a.data.ravel()[index], (a,), back, "take")


# -- pooling --------------------------------------------------------------

def global_avg_pool(x) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def channel_avg_pool(x) -> Tensor:
    return mean(x, axis=1, keepdims=True)


def channel_max_pool(x) -> Tensor:
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)
    return make_node(out, (x,), back, "channel_max_pool")


# -- convolution ----------------------------------------------------------

def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N, C*k*k, Ho*Wo)`` built from k*k shifted slices."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + ho, j:j + wo] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def conv2d(x, w, b=None, padding: int | None = None) -> Tensor:
    """Stride-1 2-D cross-correlation, ``x`` (N,C,H,W) with ``w`` (O,C,k,k).

    ``padding`` defaults to ``k // 2`` (same size for odd kernels); padding
    uses zeros.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: weight expects {w.shape[1]} channels, input has {x.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k:
        raise ShapeError("conv2d: kernel must be square")
    pad = k // 2 if padding is None else int(padding)
    n, _, h, wd = x.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    o = w.shape[0]
    cols = _im2col(x.data, k, pad)
    wmat = w.data.reshape(o, -1)
    w_flip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)
    out = np.matmul(wmat, cols)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
        out += b.data[:, None]
        parents = (x, w, b)
    out = out.reshape(n, o, ho, wo)

    def back(g):
        gx = gw = gb = None
        gm = g.reshape(n, o, ho * wo)
        if x.requires_grad:
            if k - 1 - pad >= 0:
                # full correlation of the gradient with the flipped, transposed kernel
                gcols = _im2col(g, k, k - 1 - pad)
                gx = np.matmul(w_flip, gcols).reshape(x.shape)
            else:
                gx = _col2im(np.matmul(wmat.T, gm), x.shape, k, pad)
        if w.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[:len(parents)]
    return make_node(out, parents, back, "conv2d")


# -- resampling -----------------------------------------------------------

def linear_resample(x, rows: np.ndarray, cols: np.ndarray, op: str = "resample") -> Tensor:
    """Apply separable linear maps: ``y = rows @ x @ cols.T`` on the last two axes."""
    x = as_tensor(x)
    if rows.shape[1] != x.shape[-2] or cols.shape[1] != x.shape[-1]:
        raise ShapeError(f"{op}: matrices {rows.shape}/{cols.shape} do not fit input {x.shape}")
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def back(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)
    return make_node(out, (x,), back, op)


def bilinear_resample(x, size) -> Tensor:
    """Bilinear resize (half-pixel centers, clamped borders) to ``size=(H, W)``."""
    x = as_tensor(x)
    return linear_resample(x, _rs.bilinear_matrix(x.shape[-2], size[0]),
                           _rs.bilinear_matrix(x.shape[-1], size[1]), "bilinear_resample")


def bicubic_downsample(x, factor: int = 2) -> Tensor:
    """Catmull-Rom bicubic reduction by an integer factor (sizes round up)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ho, wo = -(-h // factor), -(-w // factor)
    return linear_resample(x, _rs.cubic_matrix(h, ho), _rs.cubic_matrix(w, wo), "bicubic_downsample")
