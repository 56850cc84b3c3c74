"""Differentiable ops over :class:`Tensor`.

Each op computes its forward value with numpy and registers a backward
closure. Reductions accumulate in float64 and cast back to the storage
dtype.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ACC_DTYPE, ShapeError, Tensor, accumulate, as_tensor, make_node

_GELU_C = math.sqrt(2.0 / math.pi)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(x, dtype=dtype)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return make_node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s_ = a.dtype.type(s)

    def backward(g):
        accumulate(a, g * s_)

    return make_node(a.data * s_, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D and is then shared across the batch."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            accumulate(b, gb)

    return make_node(out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        accumulate(a, np.transpose(g, inv))

    return make_node(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(g):
        accumulate(a, g.reshape(a.shape))

    return make_node(out, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True, dtype=ACC_DTYPE).astype(a.dtype)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True, dtype=ACC_DTYPE).astype(a.dtype)
        accumulate(a, y * (g - inner))

    return make_node(y, (a,), backward)


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis (axis dropped)."""
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True, dtype=ACC_DTYPE)
    out = (np.log(s) + m).astype(a.dtype)

    def backward(g):
        p = np.exp(a.data - out).astype(a.dtype)
        accumulate(a, p * g)

    return make_node(out[..., 0], (a,), lambda g: backward(g[..., None]))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True, dtype=ACC_DTYPE)
    xc = a.data - mu.astype(a.dtype)
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=ACC_DTYPE)
    rstd = (1.0 / np.sqrt(var + eps)).astype(a.dtype)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0, dtype=ACC_DTYPE))
        if bias.requires_grad:
            accumulate(bias, g.reshape(-1, d).sum(axis=0, dtype=ACC_DTYPE))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True, dtype=ACC_DTYPE).astype(a.dtype)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True, dtype=ACC_DTYPE).astype(a.dtype)
            accumulate(a, rstd * (gx - m1 - xhat * m2))

    return make_node(out, (a, gain, bias), backward)


def batch_norm(a: Tensor, gain: Tensor, bias: Tensor, mean=None, var=None, eps: float = 1e-5):
    """Per-channel normalization over every axis but the last.

    Without ``mean``/``var`` the batch statistics are used (and
    differentiated through); returns ``(out, batch_mean, batch_var)``.
    """
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"batch_norm: input {a.shape} vs gain {gain.shape} / bias {bias.shape}")
    flat = a.data.reshape(-1, d)
    batch = mean is None
    if batch:
        mean = flat.mean(axis=0, dtype=ACC_DTYPE)
        var = ((flat - mean.astype(a.dtype)) ** 2).mean(axis=0, dtype=ACC_DTYPE)
    rstd = (1.0 / np.sqrt(np.asarray(var, dtype=ACC_DTYPE) + eps)).astype(a.dtype)
    xhat = (a.data - np.asarray(mean).astype(a.dtype)) * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        g2 = g.reshape(-1, d)
        x2 = xhat.reshape(-1, d)
        if gain.requires_grad:
            accumulate(gain, (g2 * x2).sum(axis=0, dtype=ACC_DTYPE))
        if bias.requires_grad:
            accumulate(bias, g2.sum(axis=0, dtype=ACC_DTYPE))
        if a.requires_grad:
            gx = g * gain.data
            if not batch:
                accumulate(a, gx * rstd)
                return
            gx2 = gx.reshape(-1, d)
            m1 = gx2.mean(axis=0, dtype=ACC_DTYPE).astype(a.dtype)
            m2 = (gx2 * x2).mean(axis=0, dtype=ACC_DTYPE).astype(a.dtype)
            accumulate(a, rstd * (gx - m1 - xhat * m2))

    return make_node(out, (a, gain, bias), backward), mean, var


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    f = a.dtype.type
    x2 = x * x
    t = np.tanh(x * (f(_GELU_C) + f(_GELU_C * 0.044715) * x2))
    out = f(0.5) * x * (f(1.0) + t)

    def backward(g):
        du = f(_GELU_C) + f(3 * _GELU_C * 0.044715) * x2
        d = f(0.5) * (f(1.0) + t) + f(0.5) * x * (f(1.0) - t * t) * du
        accumulate(a, g * d)

    return make_node(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def backward(g):
        accumulate(a, g * pos)

    return make_node(np.where(pos, a.data, 0).astype(a.dtype), (a,), backward)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis`` (dropped). Ties route the gradient to the first maximum."""
    axis = axis % a.ndim
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        accumulate(a, ga)

    return make_node(np.squeeze(out, axis), (a,), backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.asarray(a.data.mean(dtype=ACC_DTYPE), dtype=a.dtype)
        n = a.data.size

        def backward(g):
            accumulate(a, np.broadcast_to(g / a.dtype.type(n), a.shape))

        return make_node(out, (a,), backward)
    axis = axis % a.ndim
    n = a.shape[axis]
    out = a.data.mean(axis=axis, dtype=ACC_DTYPE).astype(a.dtype)

    def backward(g):
        accumulate(a, np.broadcast_to(np.expand_dims(g, axis) / a.dtype.type(n), a.shape))

    return make_node(out, (a,), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.asarray(a.data.sum(dtype=ACC_DTYPE), dtype=a.dtype)

        def backward(g):
            accumulate(a, np.broadcast_to(g, a.shape))

        return make_node(out, (a,), backward)
    axis = axis % a.ndim
    out = a.data.sum(axis=axis, dtype=ACC_DTYPE).astype(a.dtype)

    def backward(g):
        accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return make_node(out, (a,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis.

    ``a`` is ``(..., N, D)``; ``idx`` is ``(M,)`` shared by every leading
    slice or ``(B, M)`` matched to a ``(B, N, D)`` input.
    """
    idx = np.asarray(idx, dtype=np.intp)
    n, d = a.shape[-2], a.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: indices out of range for axis of size {n}")
    if idx.ndim == 1:
        out = a.data[..., idx, :]

        def backward(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, (Ellipsis, idx, slice(None)), g)
            accumulate(a, ga)

        return make_node(out, (a,), backward)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: input {a.shape} vs indices {idx.shape}")
    b = a.shape[0]
    flat = (idx + (np.arange(b) * n)[:, None]).reshape(-1)
    out = a.data.reshape(b * n, d)[flat].reshape(b, idx.shape[1], d)

    def backward(g):
        ga = np.zeros((b * n, d), dtype=a.dtype)
        np.add.at(ga, flat, g.reshape(-1, d))
        accumulate(a, ga.reshape(a.shape))

    return make_node(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                accumulate(t, g[tuple(sl)])

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def backward(g):
        accumulate(a, g)

    return make_node(out, (a,), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit length; norms are floored at ``eps``."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True, dtype=ACC_DTYPE))
    denom = np.maximum(norm, eps).astype(a.dtype)
    y = a.data / denom
    live = norm > eps

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True, dtype=ACC_DTYPE).astype(a.dtype)
        accumulate(a, np.where(live, (g - y * inner) / denom, g / denom))

    return make_node(y, (a,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    cond = np.asarray(cond, dtype=bool)
    out_shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            accumulate(a, np.where(cond, g, 0).astype(g.dtype))
        if b.requires_grad:
            accumulate(b, np.where(cond, 0, g).astype(g.dtype))

    out = np.where(cond, a.data, b.data)
    return make_node(np.broadcast_to(out, out_shape), (a, b), backward)


def index(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        accumulate(a, ga)

    return make_node(a.data[key], (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        accumulate(a, g / a.data)

    return make_node(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        accumulate(a, g * out)

    return make_node(out, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)
