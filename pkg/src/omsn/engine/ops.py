"""Forward kernels and their analytic gradients.

Layout is NCHW throughout. Every op preserves the floating dtype of its
inputs, so a graph built from float64 leaves runs in double precision.
"""

from __future__ import annotations

import functools
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result


class ShapeError(ValueError):
    """Operand shapes are not conformable for the requested op."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# --------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,))


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return make_result(out, (x,), lambda g: (-g * out * out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = np.power(x.data, e)

    def backward(g):
        return (g * e * np.power(x.data, e - 1.0),)

    return make_result(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(out, (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask
    return make_result(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


# ------------------------------------------------------------------ shaping
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: empty input list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return make_result(out, xs, backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack NCHW maps along the channel axis, in argument order."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    b, _, h, w = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != b or t.shape[2:] != (h, w):
            raise ShapeError(
                f"concat_channels: expected (B={b}, *, {h}, {w}), got {t.shape}")
    return concat(xs, axis=1)


# ------------------------------------------------------------- convolution
def _check4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D NCHW tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    if k == 1:
        sub = xp[:, :, : stride * ho : stride, : stride * wo : stride]
        return np.ascontiguousarray(sub).reshape(b, c, ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = shape
    dxp = np.zeros(shape, dtype=dcols.dtype)
    d = dcols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    return dxp


def _conv2d_backward(g, x_shape, cols, wmat, k, stride, padding, ho, wo, need_x):
    """Gradients of a cross-correlation w.r.t. (input, weight matrix, bias)."""
    b, o = g.shape[:2]
    dy = g.reshape(b, o, ho * wo)
    dw = np.zeros_like(wmat)
    for n in range(b):
        dw += dy[n] @ cols[n].T
    db = dy.sum(axis=(0, 2))
    dx = None
    if need_x:
        dcols = np.matmul(wmat.T, dy)
        hp, wp = x_shape[2] + 2 * padding, x_shape[3] + 2 * padding
        dxp = _col2im(dcols, (b, x_shape[1], hp, wp), k, stride, ho, wo)
        dx = dxp[:, :, padding : padding + x_shape[2], padding : padding + x_shape[3]]
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation; weight is (out, in, k, k)."""
    _check4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (out, in, k, k), got {weight.shape}")
    b, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if h + 2 * padding < k or w + 2 * padding < k or ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: kernel {k} with padding {padding} gives empty output for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, o, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx, dw, db = _conv2d_backward(g, x.shape, cols, wmat, k, stride, padding, ho, wo,
                                      x.requires_grad)
        grads = (dx, dw.reshape(weight.shape))
        return grads if bias is None else grads + (db,)

    return make_result(out, parents, backward)


# -------------------------------------------------------------- batch norm
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of (B, C, H, W) or (B, C) input.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, exponential
    moving average with weight ``momentum`` on the new value).
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-D or 4-D input, got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,) or running_mean.shape != (ch,) \
            or running_var.shape != (ch,):
        raise ShapeError(f"batch_norm: parameters do not match {ch} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, ch) if x.ndim == 2 else (1, ch, 1, 1)
    n = x.data.size // ch
    xd = x.data

    if training:
        if n <= 1:
            raise ShapeError("batch_norm: a single value per channel has no variance in training mode")
        mu = xd.mean(axis=axes)
        xc = xd - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = xc * inv_std.reshape(bshape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * inv_std.reshape(bshape)

    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (dxhat - s1 / n - xhat * (s2 / n)) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------- pooling
def pool_output_size(size: int, kernel: int, stride: int, padding: int = 0,
                     ceil_mode: bool = False) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"pool: kernel {kernel} larger than padded input {size + 2 * padding}")
    if ceil_mode:
        return -(-span // stride) + 1
    return span // stride + 1


def _pool_windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.reshape(*win.shape[:4], k * k)


def max_pool(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0,
             ceil_mode: bool = False) -> Tensor:
    """Windowed maximum; out-of-range cells behave as -inf."""
    _check4d(x, "max_pool")
    s = kernel if stride is None else stride
    b, c, h, w = x.shape
    ho = pool_output_size(h, kernel, s, padding, ceil_mode)
    wo = pool_output_size(w, kernel, s, padding, ceil_mode)
    hp, wp = (ho - 1) * s + kernel, (wo - 1) * s + kernel
    pad_b, pad_r = max(hp - h - padding, 0), max(wp - w - padding, 0)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, pad_b), (padding, pad_r)),
                constant_values=-np.inf)
    win = _pool_windows(xp, kernel, s, ho, wo)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    ph, pw = xp.shape[2], xp.shape[3]

    def backward(g):
        rows = np.arange(ho)[:, None] * s + arg // kernel
        cols = np.arange(wo)[None, :] * s + arg % kernel
        plane = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None])
        flat = (plane * ph + rows) * pw + cols
        dxp = np.bincount(flat.ravel(), weights=g.ravel(), minlength=b * c * ph * pw)
        dxp = dxp.astype(g.dtype).reshape(b, c, ph, pw)
        return (np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]),)

    return make_result(out, (x,), backward)


def avg_pool(x: Tensor, kernel: int, stride: Optional[int] = None,
             ceil_mode: bool = False) -> Tensor:
    """Windowed mean over the in-bounds cells of each window."""
    _check4d(x, "avg_pool")
    s = kernel if stride is None else stride
    b, c, h, w = x.shape
    ho = pool_output_size(h, kernel, s, 0, ceil_mode)
    wo = pool_output_size(w, kernel, s, 0, ceil_mode)
    hp, wp = (ho - 1) * s + kernel, (wo - 1) * s + kernel
    pad = ((0, 0), (0, 0), (0, max(hp - h, 0)), (0, max(wp - w, 0)))
    xp = np.pad(x.data, pad)
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), pad)
    count = _pool_windows(ones, kernel, s, ho, wo).sum(axis=-1)
    out = _pool_windows(xp, kernel, s, ho, wo).sum(axis=-1) / count

    def backward(g):
        gs = g / count
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gs
        return (np.ascontiguousarray(dxp[:, :, :h, :w]),)

    return make_result(out.astype(x.dtype, copy=False), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H x W per channel: (B, C, H, W) -> (B, C)."""
    _check4d(x, "global_avg_pool")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)

    return make_result(out, (x,), backward)


# ----------------------------------------------------------------- resizing
@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of half-pixel bilinear weights."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    a = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(a, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(a, (np.arange(n_out), i1), frac)
    a = a.astype(dtype_name)
    a.setflags(write=False)
    return a


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centre bilinear resize to exactly ``(out_h, out_w)``."""
    _check4d(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} must be positive")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    ah = _interp_matrix(h, out_h, x.dtype.name)
    aw = _interp_matrix(w, out_w, x.dtype.name)
    out = np.matmul(ah, np.matmul(x.data, aw.T))

    def backward(g):
        return (np.matmul(ah.T, np.matmul(g, aw)),)

    return make_result(out, (x,), backward)


# ----------------------------------------------------------------- dense-ish
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (B, in) @ weight.T (in, out) + bias."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def scale_channels(x: Tensor, w: Tensor) -> Tensor:
    """Multiply each channel plane of x (B, C, H, W) by w (B, C) or (C,)."""
    _check4d(x, "scale_channels")
    b, c = x.shape[:2]
    if w.shape not in ((b, c), (c,)):
        raise ShapeError(f"scale_channels: weights {w.shape} do not match {(b, c)}")
    w4 = w.data.reshape((b if w.ndim == 2 else 1), c, 1, 1)
    out = x.data * w4

    def backward(g):
        gx = g * w4
        gw = (g * x.data).sum(axis=(2, 3))
        if w.ndim == 1:
            gw = gw.sum(axis=0)
        return gx, gw

    return make_result(out, (x, w), backward)
