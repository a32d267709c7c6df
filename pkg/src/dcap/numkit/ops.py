"""Differentiable primitives.

Image-like tensors are channels-last: ``(N, H, W, C)``. A feature map of one
image is therefore an ``(h, w, d)`` block and ``reshape(N, h*w, d)`` lists its
local descriptors in row-major site order at no cost.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import _kernels
from .tensor import ShapeError, Tensor, get_default_dtype, make_result

# Per-forward record of relu sign patterns / max-pool winners, used by the
# gradient checker to reject coordinates whose perturbation crosses a kink.
_kink_log: list | None = None


@contextlib.contextmanager
def record_kinks():
    global _kink_log
    old = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = old


def _log_kink(kind: str, pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append((kind, pattern.shape, np.packbits(pattern.reshape(-1)).tobytes()
                          if pattern.dtype == bool else pattern.tobytes()))


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "operands cannot be broadcast together", a.shape, b.shape) from None


# ---- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_result(out, (a, b), grad_fn, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0
    _log_kink("relu", mask)
    return make_result(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), grad_fn, "log_softmax")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain (non-differentiable) softmax over numpy data."""
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


# ---- shape manipulation and reductions ------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape to {tuple(shape)}", old) from None
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.asarray(a.data[index]), (a,), grad_fn, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_const(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", f"extents must agree off axis {axis}", *[t.shape for t in tensors])
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                       lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast to {tuple(shape)}", old) from None
    return make_result(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands must be at least 2-D", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner extents differ", a.shape, b.shape)

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias`` with weight ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", "input depth does not match weight rows", x.shape, weight.shape)
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---- convolutional network primitives ----------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, channels-last; ``weight`` is ``(kh, kw, c_in, c_out)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", "expected (N,H,W,C) input and (kh,kw,Cin,Cout) weight", x.shape, weight.shape)
    n, h, w, c = x.shape
    kh, kw, cin, cout = weight.shape
    if c != cin:
        raise ShapeError("conv2d", f"input has {c} channels, kernel expects {cin}", x.shape, weight.shape)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", "bias must have one entry per output channel", bias.shape, weight.shape)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", "kernel larger than padded input", x.shape, weight.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    wd = weight.data
    use_cols = kh * kw * cin <= 64
    out, cols = _correlate(xp, wd, stride, ho, wo, use_cols)
    if bias is not None:
        out += bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if weight.requires_grad:
            if cols is not None:
                gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
            else:
                gw = np.empty_like(wd)
                for i, j, sl in _spans(kh, kw, stride, ho, wo):
                    gw[i, j] = xp[sl].reshape(-1, cin).T @ g2
        if x.requires_grad:
            if stride == 1 and pad <= min(kh, kw) - 1:
                # input gradient is a full correlation with the flipped, transposed kernel
                ph, pw = kh - 1 - pad, kw - 1 - pad
                gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else g
                flipped = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2))
                gx, _ = _correlate(gp, flipped, 1, h, w, False)
            else:
                gxp = np.zeros_like(xp)
                for i, j, sl in _spans(kh, kw, stride, ho, wo):
                    gxp[sl] += g @ wd[i, j].T
                gx = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, grad_fn, "conv2d")


def _spans(kh: int, kw: int, stride: int, ho: int, wo: int):
    return [(i, j, np.s_[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :])
            for i in range(kh) for j in range(kw)]


def _correlate(xp: np.ndarray, wd: np.ndarray, stride: int, ho: int, wo: int, use_cols: bool):
    """Valid cross-correlation of a padded batch; returns (output, im2col matrix or None)."""
    kh, kw, cin, cout = wd.shape
    n = xp.shape[0]
    if kh == 1 and kw == 1:
        sub = xp[:, ::stride, ::stride, :] if stride > 1 else xp
        return sub @ wd[0, 0], None
    if use_cols:
        cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
        return (cols @ wd.reshape(-1, cout)).reshape(n, ho, wo, cout), cols
    out = np.zeros((n, ho, wo, cout), dtype=xp.dtype)
    for i, j, sl in _spans(kh, kw, stride, ho, wo):
        out += xp[sl] @ wd[i, j]
    return out, None


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", "affine parameters must match channel count", x.shape, gamma.shape)
    axes = tuple(range(x.ndim - 1))
    x2 = np.ascontiguousarray(x.data).reshape(-1, c)
    m = x2.shape[0]
    gd, bd = gamma.data.astype(x.dtype, copy=False), beta.data.astype(x.dtype, copy=False)
    if training:
        xhat = np.empty_like(x2)
        out = np.empty_like(x2)
        mu, var, inv = _kernels.bn_train_forward(x2, gd, bd, eps, xhat, out)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def grad_fn(g):
            g2 = np.ascontiguousarray(g).reshape(-1, c)
            gx = np.empty_like(g2)
            gg, gxh = _kernels.bn_train_backward(g2, xhat, gd, inv, gx)
            return (gx.reshape(x.shape) if x.requires_grad else None,
                    gxh.astype(gamma.dtype), gg.astype(beta.dtype))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x2 - running_mean.astype(x.dtype)) * inv
        out = xhat * gd + bd

        def grad_fn(g):
            g2 = g.reshape(-1, c)
            return (g * (gd * inv) if x.requires_grad else None,
                    (g2 * xhat).sum(axis=0), g2.sum(axis=0))

    return make_result(out.reshape(x.shape), (x, gamma, beta), grad_fn, "batch_norm")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling with floor semantics (a trailing odd row/column is dropped).

    Ties go to the first site in row-major order.
    """
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError("max_pool2d", f"spatial extents smaller than the {size}x{size} window", x.shape)
    xd = np.ascontiguousarray(x.data)
    if size == 2:
        out = np.empty((n, ho, wo, c), dtype=xd.dtype)
        idx = np.empty((n, ho, wo, c), dtype=np.int8)
        _kernels.pool2_forward(xd, out, idx)
    else:
        win = xd[:, :ho * size, :wo * size].reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    _log_kink("max_pool", idx)

    def grad_fn(g):
        if size == 2:
            gx = np.zeros_like(xd)
            _kernels.pool2_backward(np.ascontiguousarray(g), idx, gx)
            return (gx,)
        gw = np.zeros((n, ho, wo, c, size * size), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(xd)
        gx[:, :ho * size, :wo * size] = gw.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(
            n, ho * size, wo * size, c)
        return (gx,)

    return make_result(out, (x,), grad_fn, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """``(N, H, W, C) -> (N, C)``."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", "expected (N,H,W,C)", x.shape)
    return mean(x, axis=(1, 2))


def hflip(images: np.ndarray) -> np.ndarray:
    """Mirror a channels-last image batch left-right (data augmentation, no grad)."""
    return images[:, :, ::-1, :]
