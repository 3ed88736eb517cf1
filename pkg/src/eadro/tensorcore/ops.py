"""Forward operators with their reverse-mode rules.

Every op takes Tensors (or array-likes for constants) and returns a Tensor whose
backward closure maps the upstream gradient to one gradient per parent.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make


def _acc_sum(x: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    """Reduce in float64 and round back.

    float32 np.sum results depend on buffer alignment; accumulating in double
    makes reductions reproducible across runs and allocations.
    """
    if x.dtype == np.float32:
        return x.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    return x.sum(axis=axis, keepdims=keepdims)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(lead + ax for ax, n in enumerate(shape) if n == 1 and g.shape[lead + ax] != 1)
    if axes:
        g = _acc_sum(g, axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make(out, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim == 2:
        # one flat GEMM instead of numpy's per-slice loop
        k, m = b.shape
        if m == 1:
            # BLAS GEMV may accumulate a row differently depending on its position,
            # which would break exact equivariance under row permutations
            out = _acc_sum(a.data.reshape(-1, k) * b.data[:, 0], 1, keepdims=True).astype(a.data.dtype)
            out = out.reshape(a.shape[:-1] + (1,))
        else:
            out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (m,))
    elif b.shape[-1] == 1:
        # batched GEMV: same position dependence, same remedy
        out = _acc_sum(a.data * np.swapaxes(b.data, -1, -2), -1, keepdims=True).astype(a.data.dtype)
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if b.ndim == 2:
            g2 = g.reshape(-1, m)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make(out, (a, b), backward, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} are incompatible") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(out, tuple(ts), backward, "concat")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return make(out, (a,), backward, "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return make(out, (a,), backward, "transpose")


def take(a, index: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis with an integer index array."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (ga,)

    return make(out, (a,), backward, "take")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make(out, (a,), backward, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.data.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return make(out, (a,), backward, "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    out = a.data * scale

    def backward(g):
        return (g * scale,)

    return make(out, (a,), backward, "leaky_relu")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return make(out, (a,), backward, "log")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return make(out, (a,), backward, "clamp")


def _reduce_sum(x: np.ndarray, axis: int, ordered: bool) -> np.ndarray:
    if ordered:
        # summing sorted terms makes the result independent of input order
        x = np.sort(x, axis=axis)
    return _acc_sum(x, axis, keepdims=True)


def sum(a, axis: int | None = None, keepdims: bool = False, ordered: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        out = np.asarray(_acc_sum(np.sort(flat) if ordered else flat, 0), dtype=a.data.dtype)

        def backward(g):
            return (np.broadcast_to(g, a.shape).copy(),)

        return make(out, (a,), backward, "sum")

    axis = axis % a.ndim
    out = _reduce_sum(a.data, axis, ordered)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(out, (a,), backward, "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None, ordered: bool = False) -> Tensor:
    """Softmax along `axis`; entries where `mask` is False get probability 0.

    With ordered=True the normaliser is accumulated in sorted order so that a
    permutation of the inputs permutes the outputs bit-exactly.
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("softmax: a row has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / _reduce_sum(e, axis, ordered)).astype(a.data.dtype, copy=False)

    def backward(g):
        dot = _acc_sum(g * out, axis, keepdims=True)
        return (out * (g - dot),)

    return make(out, (a,), backward, "softmax")


def glu(a, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis length {n} is odd")
    idx = np.arange(n)
    first = take(a, idx[: n // 2], axis)
    second = take(a, idx[n // 2:], axis)
    return mul(first, sigmoid(second))


def conv1d_causal(x, w, dilation: int = 1, bias=None, channels_last: bool = False) -> Tensor:
    """Dilated causal convolution with weights (C_out, C_in, K).

    y[n, c, t] = sum_{i,j} w[c, i, j] * x[n, i, t - d*(K-1-j)], zero left padding.
    Input is (N, C_in, T), or (N, T, C_in) with channels_last=True, in which case
    the output is (N, T, C_out). A 2-D input is treated as a batch of one.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    c_axis = 2 if channels_last else 1
    if x.ndim != 3 or w.ndim != 3 or x.shape[c_axis] != w.shape[1]:
        raise ShapeError(f"conv1d_causal: input {x.shape} and weights {w.shape} are incompatible")
    if dilation < 1:
        raise ShapeError(f"conv1d_causal: dilation must be >= 1, got {dilation}")
    xl = x.data if channels_last else x.data.transpose(0, 2, 1)
    n, t, c_in = xl.shape
    c_out, _, k = w.shape
    pad = dilation * (k - 1)
    xp = np.concatenate([np.zeros((n, pad, c_in), dtype=xl.dtype), xl], axis=1) if pad else xl
    # cols[n, t, j*C_in + i] = xp[n, t + j*d, i]
    cols = np.concatenate([xp[:, j * dilation: j * dilation + t, :] for j in range(k)], axis=-1)
    cols = cols.reshape(n * t, k * c_in)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 1)).reshape(c_out, k * c_in)
    out = (cols @ wmat.T).reshape(n, t, c_out)
    if not channels_last:
        out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(g):
        g2 = (g if channels_last else g.transpose(0, 2, 1)).reshape(n * t, c_out)
        gw = (g2.T @ cols).reshape(c_out, k, c_in).transpose(0, 2, 1)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, t, k, c_in)
            gxp = np.zeros((n, t + pad, c_in), dtype=xl.dtype)
            for j in range(k):
                gxp[:, j * dilation: j * dilation + t, :] += gcols[:, :, j, :]
            gx = gxp[:, pad:, :]
            if not channels_last:
                gx = gx.transpose(0, 2, 1)
        return gx, np.ascontiguousarray(gw)

    y = make(out, (x, w), backward, "conv1d_causal")
    if bias is not None:
        shape = (1, 1, c_out) if channels_last else (1, c_out, 1)
        y = add(y, reshape(as_tensor(bias), shape))
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def batchnorm_1d(x, gamma, beta, running_mean: Tensor, running_var: Tensor,
                 training: bool, momentum: float = 0.9, eps: float = 1e-5,
                 channels_last: bool = False) -> Tensor:
    """Per-channel normalisation of (N, C, T), or (N, T, C), over the N and T axes.

    In training mode batch statistics are used and the running buffers are
    updated in place (running = momentum * running + (1 - momentum) * batch).
    In eval mode the op is the fixed affine map given by the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c_axis = 2 if channels_last else 1
    if x.ndim != 3 or gamma.shape != (x.shape[c_axis],) or beta.shape != (x.shape[c_axis],):
        raise ShapeError(f"batchnorm_1d: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    c = x.shape[c_axis]
    bshape = (1, 1, c) if channels_last else (1, c, 1)
    axes = (0, 1) if channels_last else (0, 2)
    dt = x.data.dtype
    if not training:
        scale = gamma.data / np.sqrt(running_var.data + eps)
        shift = beta.data - running_mean.data * scale
        xd = x.data

        def backward_eval(g):
            gs = g * scale.reshape(bshape)
            xhat = (xd - running_mean.data.reshape(bshape)) / np.sqrt(running_var.data.reshape(bshape) + eps)
            return gs, _acc_sum(g * xhat, axes), _acc_sum(g, axes)

        out = (xd * scale.reshape(bshape).astype(dt) + shift.reshape(bshape).astype(dt)).astype(dt, copy=False)
        return make(out, (x, gamma, beta), backward_eval, "batchnorm")

    xd = x.data
    m = xd.shape[0] * xd.shape[axes[1]]
    mu = (_acc_sum(xd, axes, keepdims=True) / m).astype(dt)
    xc = xd - mu
    var = _acc_sum(xc * xc, axes, keepdims=True) / m
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = xc * inv
    unbiased = var.reshape(c) * (m / max(m - 1, 1))
    running_mean.data = (momentum * running_mean.data + (1 - momentum) * mu.reshape(c)).astype(running_mean.data.dtype)
    running_var.data = (momentum * running_var.data + (1 - momentum) * unbiased).astype(running_var.data.dtype)
    g3 = gamma.data.reshape(bshape)
    out = xhat * g3 + beta.data.reshape(bshape)

    def backward(g):
        gb = _acc_sum(g, axes)
        gg = _acc_sum(g * xhat, axes)
        gx = (g3 * inv) * (g - (gb / m).reshape(bshape) - xhat * (gg / m).reshape(bshape))
        return gx, gg, gb

    return make(out.astype(dt, copy=False), (x, gamma, beta), backward, "batchnorm")


def identity(a) -> Tensor:
    return as_tensor(a)
